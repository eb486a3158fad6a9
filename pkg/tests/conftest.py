import numpy as np
import pytest

from ltv_watermark.detector import analytic_normalization
from ltv_watermark.synthesis import build_car_scenario, lti_scenario
from ltv_watermark.system import GainSchedule, NoiseSchedule, Scenario, StateSpaceSchedule


@pytest.fixture(scope="session")
def car():
    return build_car_scenario()


@pytest.fixture(scope="session")
def car_norm(car):
    return analytic_normalization(car.scenario)


def random_spd(rng, n, scale=1.0):
    m = rng.standard_normal((n, n))
    return scale * (m @ m.T / n + 0.5 * np.eye(n))


def random_ltv(rng, p, q, r, N, dt=0.1):
    """Random contracting LTV loop with arbitrary (small) gains."""
    A = rng.standard_normal((N, p, p))
    A *= 0.6 / np.linalg.norm(A, 2, axis=(1, 2))[:, None, None]
    B = 0.3 * rng.standard_normal((N, p, q))
    C = rng.standard_normal((N, r, p))
    K = 0.2 * rng.standard_normal((N, q, p))
    L = 0.05 * rng.standard_normal((N, p, r))
    Sw = np.stack([random_spd(rng, p, 0.1) for _ in range(N)])
    Sz = np.stack([random_spd(rng, r, 0.1) for _ in range(N)])
    Se = random_spd(rng, q, 0.5)
    return Scenario(StateSpaceSchedule(A, B, C, dt), NoiseSchedule(Sw, Sz, Se), GainSchedule(K, L), "random")


@pytest.fixture
def small_lti():
    A = [[0.9, 0.1], [0.0, 0.8]]
    B = [[0.0], [1.0]]
    C = [[1.0, 0.0]]
    return lti_scenario(A, B, C, 0.01 * np.eye(2), [[0.01]], [[1.0]], 400, dt=0.1)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
