import numpy as np
import pytest

from ltv_watermark.attack import replay_preset
from ltv_watermark.system import (
    GainSchedule,
    NoiseSchedule,
    Scenario,
    SimulationState,
    StateSpaceSchedule,
    child_seed,
    draw_noise,
    simulate,
    step,
)

from conftest import random_ltv


def test_schedule_shape_checks():
    with pytest.raises(ValueError, match="inconsistent"):
        StateSpaceSchedule(np.zeros((3, 2, 2)), np.zeros((2, 2, 1)), np.zeros((3, 1, 2)), 0.1)
    with pytest.raises(ValueError, match="dt"):
        StateSpaceSchedule(np.zeros((3, 2, 2)), np.zeros((3, 2, 1)), np.zeros((3, 1, 2)), 0.0)


def test_gain_shape_check(small_lti):
    bad = GainSchedule(small_lti.gains.K[:, :, :1], small_lti.gains.L)
    with pytest.raises(ValueError, match="gain shapes"):
        bad.check(small_lti.schedule)


def test_step_rejects_out_of_range(small_lti):
    sc = small_lti
    state = SimulationState(sc.horizon, np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2))
    with pytest.raises(IndexError):
        step(sc.schedule, sc.noise, sc.gains, state, np.zeros(1), np.zeros(1), np.random.default_rng())


def test_step_loop_matches_simulate():
    """Stepping with the simulator's noise reproduces its trace exactly."""
    rng = np.random.default_rng(3)
    sc = random_ltv(rng, 3, 2, 2, 40)
    attack = replay_preset(sc, start_step=15)
    trace = simulate(sc, attack, seed=11, backend="python")
    w, z, e, omega, zeta = draw_noise(sc, sc.horizon, 11, attack)
    state = SimulationState.zero(3)
    xi = np.zeros(3)
    for n in range(sc.horizon):
        assert np.allclose(state.x, trace.x[n], atol=1e-12)
        assert np.allclose(state.x_hat, trace.x_hat[n], atol=1e-12)
        C = sc.schedule.C[n]
        if n >= attack.start_step:
            v = attack.alpha * (C @ state.x + z[n]) + C @ xi + zeta[n]
            Ab = sc.schedule.A[n] + sc.schedule.B[n] @ sc.gains.K[n]
            xi = Ab @ xi + omega[n]
        else:
            v = np.zeros(2)
        state, y = step(sc.schedule, sc.noise, sc.gains, state, e[n], v, w_n=w[n], z_n=z[n])
        assert np.allclose(y, trace.y[n], atol=1e-12)


def test_error_split_sums_to_observer_error():
    rng = np.random.default_rng(4)
    sc = random_ltv(rng, 4, 2, 3, 60)
    trace = simulate(sc, replay_preset(sc, 20), seed=2)
    err = trace.x_hat - trace.x
    assert np.allclose(trace.delta_bar + trace.delta_hat, err, atol=1e-10)
    assert np.allclose(trace.delta_hat[:21], 0.0)


def test_same_seed_same_trace_and_shared_noise():
    rng = np.random.default_rng(5)
    sc = random_ltv(rng, 3, 1, 2, 50)
    a = simulate(sc, seed=9)
    b = simulate(sc, seed=9)
    assert a.to_csv() == b.to_csv()
    attacked = simulate(sc, replay_preset(sc, 25), seed=9)
    assert np.array_equal(attacked.e, a.e)
    assert np.array_equal(attacked.x[:26], a.x[:26])
    assert not np.array_equal(simulate(sc, seed=10).e, a.e)


def test_child_seeds_are_distinct():
    s = {tuple(child_seed(7, k, j).generate_state(2)) for k in range(3) for j in range(5)}
    assert len(s) == 15


def test_noise_schedule_allows_zero_noise_and_rejects_indefinite():
    NoiseSchedule(np.zeros((2, 2, 2)), np.zeros((2, 1, 1)), np.eye(1))
    with pytest.raises(ValueError):
        NoiseSchedule(np.zeros((2, 2, 2)), np.zeros((2, 1, 1)), -np.eye(1))
    with pytest.raises(ValueError):
        NoiseSchedule(np.zeros((2, 2, 2)), np.zeros((2, 1, 1)), np.eye(1)).require_definite()


def test_noiseless_unwatermarked_loop_stays_at_zero():
    N = 20
    sc = Scenario(
        StateSpaceSchedule(np.tile(np.eye(2) * 0.5, (N, 1, 1)), np.ones((N, 2, 1)), np.ones((N, 1, 2)), 1.0),
        NoiseSchedule(np.zeros((N, 2, 2)), np.zeros((N, 1, 1)), np.zeros((1, 1))),
        GainSchedule(np.zeros((N, 1, 2)), np.zeros((N, 2, 1))),
    )
    t = simulate(sc, seed=0)
    assert np.all(t.x == 0) and np.all(t.residual == 0)


def test_trace_csv_layout(small_lti):
    t = simulate(small_lti, horizon=5, seed=0)
    lines = t.to_csv().splitlines()
    assert lines[0].split(",")[:3] == ["n", "t", "x0"]
    assert lines[0].endswith("metric,alarm")
    assert len(lines) == 6
    assert lines[1].split(",")[-2] == ""  # pending metric


def test_horizon_bounds(small_lti):
    with pytest.raises(ValueError):
        simulate(small_lti, horizon=small_lti.horizon + 1)
    assert simulate(small_lti, horizon=0).horizon == 0
