from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import solve_discrete_are

from ltv_watermark.synthesis import (
    CarParams,
    ReferenceTrajectory,
    build_car_scenario,
    compute_kprime,
    discretize_zoh,
    kalman_forward,
    linearize_unicycle,
    noise_scale,
    riccati_backward,
    transform_state,
    unicycle_rhs,
    verify_assumptions,
    weaving_trajectory,
)
from ltv_watermark.detector import analytic_normalization
from ltv_watermark.system import NoiseSchedule, StateSpaceSchedule, simulate

from conftest import random_ltv


def taylor_zoh(Ac, Bc, dt, squarings=8, terms=20):
    """Scaling-and-squaring Taylor oracle for the ZOH pair."""
    p = Ac.shape[0]
    h = dt / 2**squarings
    A = np.zeros((p, p))
    G = np.zeros((p, p))  # integral of exp(Ac s) over [0, h]
    P = np.eye(p)
    for k in range(terms):
        A += P * h**k / factorial(k)
        G += P * h ** (k + 1) / factorial(k + 1)
        P = P @ Ac
    for _ in range(squarings):
        G = G + A @ G
        A = A @ A
    return A, G @ Bc


@given(arrays(float, (3, 3), elements=st.floats(-2, 2)), arrays(float, (3, 2), elements=st.floats(-2, 2)),
       st.sampled_from([0.01, 0.05, 0.2]))
@settings(max_examples=40, deadline=None)
def test_zoh_against_taylor_oracle(Ac, Bc, dt):
    A, B = discretize_zoh(Ac, Bc, dt)
    A_ref, B_ref = taylor_zoh(Ac, Bc, dt)
    assert np.allclose(A, A_ref, atol=1e-11)
    assert np.allclose(B, B_ref, atol=1e-11)


@given(arrays(float, (4, 4), elements=st.floats(-3, 3)), st.sampled_from([0.02, 0.05, 0.1]))
@settings(max_examples=40, deadline=None)
def test_zoh_half_steps_compose(Ac, dt):
    Bc = np.ones((4, 1))
    A, B = discretize_zoh(Ac, Bc, dt)
    Ah, Bh = discretize_zoh(Ac, Bc, dt / 2)
    assert np.allclose(A, Ah @ Ah, atol=1e-9 * max(1, np.abs(A).max()))
    assert np.allclose(B, Ah @ Bh + Bh, atol=1e-9 * max(1, np.abs(B).max()))


def test_zoh_scalar_closed_form():
    A, B = discretize_zoh([[-2.0]], [[3.0]], 0.1)
    assert A[0, 0] == pytest.approx(np.exp(-0.2), rel=1e-14)
    assert B[0, 0] == pytest.approx(3.0 * (1 - np.exp(-0.2)) / 2.0, rel=1e-13)
    A0, B0 = discretize_zoh([[0.0]], [[1.0]], 0.1)
    assert (A0[0, 0], B0[0, 0]) == pytest.approx((1.0, 0.1))
    with pytest.raises(ValueError):
        discretize_zoh([[0.0]], [[1.0]], 0.0)


def test_unicycle_jacobian_matches_finite_differences():
    traj = weaving_trajectory(0.05, 10.0)
    Ac, Bc = linearize_unicycle(traj)
    h = 1e-6
    for k in (0, 37, 150):
        s, u = traj.samples[k, :5], traj.samples[k, 5:]
        J = np.column_stack([(unicycle_rhs(s + h * ei, u) - unicycle_rhs(s - h * ei, u)) / (2 * h)
                             for ei in np.eye(5)])
        Ju = np.column_stack([(unicycle_rhs(s, u + h * ei) - unicycle_rhs(s, u - h * ei)) / (2 * h)
                              for ei in np.eye(2)])
        assert np.allclose(Ac[k], J, atol=1e-7)
        assert np.allclose(Bc[k], Ju, atol=1e-7)


def test_trajectory_is_consistent_with_dynamics():
    traj = weaving_trajectory(0.01, 20.0)
    s = traj.samples
    deriv = np.gradient(s[:, :5], 0.01, axis=0)
    rhs = np.array([unicycle_rhs(si[:5], si[5:]) for si in s])
    assert np.allclose(deriv[2:-2], rhs[2:-2], atol=2e-3)
    assert 4.99 < traj.speed.min() and traj.speed.max() < 15.01


def test_trajectory_speed_floor():
    with pytest.raises(ValueError, match="floor"):
        weaving_trajectory(0.05, 60, speed_mean=3, speed_amplitude=3, speed_floor=1.0)
    with pytest.raises(ValueError):
        ReferenceTrajectory(0.05, np.zeros((3, 6)))


def test_noise_scale_is_linear_with_floor():
    s = noise_scale([0.0, 5.0, 10.0, 15.0, 20.0], floor=0.1)
    assert s[0] == 0.1
    assert np.allclose(s[1:], np.array([5, 10, 15, 20]) / 10.0)


@given(st.floats(0.2, 1.5), st.floats(0.2, 2.0), st.floats(0.1, 3.0), st.floats(0.1, 3.0))
@settings(max_examples=40, deadline=None)
def test_scalar_riccati_fixed_point(a, b, qw, rw):
    """Backward recursion converges to the closed-form scalar DARE root."""
    N = 400
    sch = StateSpaceSchedule(np.full((N, 1, 1), a), np.full((N, 1, 1), b), np.ones((N, 1, 1)), 1.0)
    K, P = riccati_backward(sch, [[qw]], [[rw]])
    # p = q + a^2 p r / (r + b^2 p)  =>  b^2 p^2 + (r - a^2 r - q b^2) p - q r = 0
    c1 = rw - a * a * rw - qw * b * b
    p_star = (-c1 + np.sqrt(c1 * c1 + 4 * b * b * qw * rw)) / (2 * b * b)
    assert P[0, 0, 0] == pytest.approx(p_star, rel=1e-8)
    assert K[0, 0, 0] == pytest.approx(-a * b * p_star / (rw + b * b * p_star), rel=1e-8)


def test_riccati_differences_shrink_monotonically():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3)) * 0.6
    B = rng.standard_normal((3, 1))
    N = 200
    sch = StateSpaceSchedule(np.tile(A, (N, 1, 1)), np.tile(B, (N, 1, 1)), np.tile(np.eye(3), (N, 1, 1)), 1.0)
    _, P = riccati_backward(sch, np.eye(3), np.eye(1))
    d = np.linalg.norm(np.diff(P[::-1], axis=0), axis=(1, 2))[5:]
    d = d[d > 1e-12]
    assert np.all(np.diff(d) <= 1e-12)
    assert np.allclose(P[0], solve_discrete_are(A, B, np.eye(3), np.eye(1)), atol=1e-8)


def test_riccati_singular_gain_matrix():
    N = 3
    sch = StateSpaceSchedule(np.ones((N, 1, 1)), np.zeros((N, 1, 1)), np.ones((N, 1, 1)), 1.0)
    with pytest.raises(np.linalg.LinAlgError, match="singular"):
        riccati_backward(sch, [[1.0]], [[0.0]])


def test_kalman_steady_state_matches_dare():
    A = np.array([[1.0, 0.1], [0.0, 0.95]])
    C = np.array([[1.0, 0.0]])
    Sw, Sz = 0.01 * np.eye(2), np.array([[0.04]])
    N = 500
    sch = StateSpaceSchedule(np.tile(A, (N, 1, 1)), np.zeros((N, 2, 1)), np.tile(C, (N, 1, 1)), 1.0)
    noise = NoiseSchedule(np.tile(Sw, (N, 1, 1)), np.tile(Sz, (N, 1, 1)), np.eye(1))
    L, P = kalman_forward(sch, noise)
    Pinf = solve_discrete_are(A.T, C.T, Sw, Sz)
    assert np.allclose(P[-1], Pinf, atol=1e-10)
    assert np.allclose(L[-1], -A @ Pinf @ C.T / (C @ Pinf @ C.T + Sz), atol=1e-10)
    assert np.max(np.abs(np.linalg.eigvals(A + L[-1] @ C))) < 1


def test_kprime():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    K = np.zeros((1, 2))
    assert compute_kprime(A, B, np.array([[1.0, 0.0]]), K) == 1
    assert compute_kprime(A, B, np.array([[0.0, 1.0]]), K) == 0
    assert compute_kprime(np.zeros((2, 2)), B, np.array([[1.0, 0.0]]), K) is None


def test_car_assumptions_and_lyapunov_coordinates(car):
    rep = verify_assumptions(car.scenario)
    assert rep.passed
    assert rep.eta_A_bar < 1 and rep.eta_A_under < 1
    assert rep.watermark_corr_max > 1e-6
    phys = verify_assumptions(car.physical)
    assert phys.eta_A_bar > 1  # the SI realization does not contract in the 2-norm


def test_coordinate_change_preserves_residual_statistics(car, car_norm):
    phys = analytic_normalization(car.physical)
    assert np.allclose(car_norm.residual_cov, phys.residual_cov, rtol=1e-8, atol=1e-14)


def test_coordinate_change_preserves_noiseless_response(car):
    """With only the watermark driving the loop, measurements agree sample for sample."""
    import dataclasses

    def quiet(sc):
        n = dataclasses.replace(sc.noise, Sw=0 * sc.noise.Sw, Sz=0 * sc.noise.Sz)
        return dataclasses.replace(sc, noise=n)

    a = simulate(quiet(car.scenario), seed=5)
    b = simulate(quiet(car.physical), seed=5)
    assert np.allclose(a.y, b.y, atol=1e-9 * np.abs(b.y).max())
    assert np.allclose(a.residual, b.residual, atol=1e-9 * np.abs(b.y).max())


def test_transform_state_identity_roundtrip():
    rng = np.random.default_rng(2)
    sc = random_ltv(rng, 3, 1, 2, 10)
    T = np.tile(np.eye(3), (11, 1, 1))
    out = transform_state(sc, T)
    assert np.allclose(out.schedule.A, sc.schedule.A)
    assert np.allclose(out.gains.L, sc.gains.L)


def test_car_params_validation():
    with pytest.raises(ValueError):
        CarParams(dt=0)
    with pytest.raises(ValueError):
        CarParams(realization="polar")
    sc = build_car_scenario(CarParams(duration=5.0, realization="physical"))
    assert sc.scenario is sc.physical
    assert sc.scenario.horizon == 100
