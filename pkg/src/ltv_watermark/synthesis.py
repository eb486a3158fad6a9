"""Car-model LTV scenario: linearization, discretization and gain synthesis.

The car is the kinematic unicycle with state ``(x, y, heading, speed, yaw
rate)`` and inputs ``(acceleration, yaw acceleration)``; it is linearized
about a reference trajectory, discretized with a zero-order hold, stabilized
with a finite-horizon LQR and observed with a Kalman predictor whose gain
follows the ``x_hat[n+1] = ... - L y`` sign convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm, solve_discrete_are

from .linalg import psd_sqrt
from .system import GainSchedule, NoiseSchedule, Scenario, StateSpaceSchedule

STATE_NAMES = ("x", "y", "heading", "speed", "yaw_rate")
INPUT_NAMES = ("accel", "yaw_accel")
KPRIME_TOL = 1e-10
CORR_TOL = 1e-6


# --------------------------------------------------------------------------- trajectory


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Sampled reference: columns ``x, y, heading, speed, yaw_rate, accel, yaw_accel``."""

    dt: float
    samples: np.ndarray
    speed_floor: float = 1.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != 7:
            raise ValueError(f"trajectory samples must be (N, 7), got {s.shape}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if len(s) and np.min(np.abs(s[:, 3])) <= self.speed_floor:
            k = int(np.argmin(np.abs(s[:, 3])))
            raise ValueError(f"|speed| {abs(s[k, 3]):.3g} at sample {k} is below the floor {self.speed_floor}")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return len(self.samples)

    @property
    def heading(self):
        return self.samples[:, 2]

    @property
    def speed(self):
        return self.samples[:, 3]


def weaving_trajectory(dt, duration, speed_mean=10.0, speed_amplitude=5.0, speed_period=30.0,
                       heading_amplitude=0.3, heading_period=20.0, speed_floor=1.0):
    """Smooth weaving path with sinusoidal speed and heading profiles.

    Speed swings over ``speed_mean +/- speed_amplitude`` and the heading over
    ``+/- heading_amplitude`` rad, so both the geometry and the
    speed-proportional noise vary periodically along the run.
    """
    n = int(round(duration / dt))
    t = np.arange(n) * dt
    ws = 2 * np.pi / speed_period
    wh = 2 * np.pi / heading_period
    v = speed_mean + speed_amplitude * np.sin(ws * t)
    a = speed_amplitude * ws * np.cos(ws * t)
    psi = heading_amplitude * np.sin(wh * t)
    psid = heading_amplitude * wh * np.cos(wh * t)
    psidd = -heading_amplitude * wh**2 * np.sin(wh * t)
    vx = v * np.cos(psi)
    vy = v * np.sin(psi)
    x = np.concatenate([[0.0], np.cumsum(0.5 * (vx[1:] + vx[:-1]) * dt)])
    y = np.concatenate([[0.0], np.cumsum(0.5 * (vy[1:] + vy[:-1]) * dt)])
    return ReferenceTrajectory(dt, np.column_stack([x, y, psi, v, psid, a, psidd]), speed_floor)


# --------------------------------------------------------------------------- linearize / discretize


def unicycle_rhs(state, inputs):
    _, _, psi, v, psid = state
    a, psidd = inputs
    return np.array([v * np.cos(psi), v * np.sin(psi), psid, a, psidd])


def linearize_unicycle(traj):
    """Continuous-time Jacobians ``(A_c, B_c)`` at every trajectory sample."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    psi, v = traj.heading, traj.speed
    n = len(traj)
    Ac = np.zeros((n, 5, 5))
    Ac[:, 0, 2] = -v * np.sin(psi)
    Ac[:, 0, 3] = np.cos(psi)
    Ac[:, 1, 2] = v * np.cos(psi)
    Ac[:, 1, 3] = np.sin(psi)
    Ac[:, 2, 4] = 1.0
    Bc = np.zeros((n, 5, 2))
    Bc[:, 3, 0] = 1.0
    Bc[:, 4, 1] = 1.0
    return Ac, Bc


def discretize_zoh(Ac, Bc, dt):
    """Exact zero-order-hold discretization via the augmented matrix exponential.

    Accepts single matrices or ``(N, ., .)`` stacks.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    Ac = np.asarray(Ac, dtype=float)
    Bc = np.asarray(Bc, dtype=float)
    single = Ac.ndim == 2
    if single:
        Ac, Bc = Ac[None], Bc[None]
    n, p, _ = Ac.shape
    q = Bc.shape[2]
    A = np.empty((n, p, p))
    B = np.empty((n, p, q))
    M = np.zeros((p + q, p + q))
    for k in range(n):
        M[:p, :p] = Ac[k]
        M[:p, p:] = Bc[k]
        E = expm(M * dt)
        if not np.all(np.isfinite(E)):
            raise ArithmeticError(f"matrix exponential did not converge at sample {k}")
        A[k] = E[:p, :p]
        B[k] = E[:p, p:]
    if single:
        return A[0], B[0]
    return A, B


# --------------------------------------------------------------------------- gain synthesis


def riccati_backward(schedule, Q, R, P_terminal=None):
    """Finite-horizon LQR: gains ``K[n]`` (``u = K x``) and cost-to-go ``P[0..N]``.

    Uses the Joseph form ``P[n] = Q + K^T R K + Ab^T P[n+1] Ab`` with
    ``Ab = A + B K``.
    """
    N, p, q = schedule.horizon, schedule.p, schedule.q
    Q = np.asarray(Q, float)
    R = np.asarray(R, float)
    P = Q.copy() if P_terminal is None else np.asarray(P_terminal, float).copy()
    K = np.zeros((N, q, p))
    Ps = np.zeros((N + 1, p, p))
    Ps[N] = P
    for n in range(N - 1, -1, -1):
        A, B = schedule.A[n], schedule.B[n]
        G = R + B.T @ P @ B
        if np.linalg.cond(G) > 1e14:
            raise np.linalg.LinAlgError(f"R + B^T P B is singular at step {n}")
        Kn = -np.linalg.solve(G, B.T @ P @ A)
        Ab = A + B @ Kn
        P = Q + Kn.T @ R @ Kn + Ab.T @ P @ Ab
        P = 0.5 * (P + P.T)
        K[n] = Kn
        Ps[n] = P
    return K, Ps


def lqr_gains(schedule, Q, R, P_terminal=None):
    return riccati_backward(schedule, Q, R, P_terminal)[0]


def stationary_cost(A, B, Q, R):
    """Infinite-horizon LQR cost-to-go for a fixed ``(A, B)`` (terminal weight helper)."""
    return solve_discrete_are(A, B, Q, R)


def kalman_forward(schedule, noise, P0=None):
    """Kalman predictor gains ``L[n]`` and prior error covariances ``P[0..N]``.

    ``L = -A P C^T (C P C^T + Sz)^-1`` so that ``A + L C`` is the error
    dynamics.  ``P0`` defaults to zero, the exact value for a known initial state.
    """
    N, p, r = schedule.horizon, schedule.p, schedule.r
    noise.require_definite()
    P = np.zeros((p, p)) if P0 is None else np.asarray(P0, float).copy()
    L = np.zeros((N, p, r))
    Ps = np.zeros((N + 1, p, p))
    for n in range(N):
        Ps[n] = P
        A, C = schedule.A[n], schedule.C[n]
        S = C @ P @ C.T + noise.Sz[n]
        Ln = -np.linalg.solve(S.T, (A @ P @ C.T).T).T
        Al = A + Ln @ C
        P = Al @ P @ Al.T + noise.Sw[n] + Ln @ noise.Sz[n] @ Ln.T
        P = 0.5 * (P + P.T)
        L[n] = Ln
    Ps[N] = P
    return L, Ps


def observer_gains(schedule, noise, P0=None):
    return kalman_forward(schedule, noise, P0)[0]


# --------------------------------------------------------------------------- assumptions


@dataclass
class AssumptionReport:
    eta_A_bar: float
    eta_A_under: float
    eta_B: float
    eta_C: float
    eta_L: float
    eta_w: float
    eta_z: float
    eta_V: float
    eta_delta: float
    watermark_corr_avg: np.ndarray
    worst_step_A_bar: int
    worst_step_A_under: int
    passed: bool = field(init=False)

    def __post_init__(self):
        finite = all(np.isfinite(v) for v in (self.eta_B, self.eta_C, self.eta_L, self.eta_w,
                                              self.eta_z, self.eta_V, self.eta_delta))
        corr = float(np.max(np.abs(self.watermark_corr_avg))) if self.watermark_corr_avg.size else 0.0
        self.passed = bool(self.eta_A_bar < 1 and self.eta_A_under < 1 and finite and corr > CORR_TOL)

    @property
    def watermark_corr_max(self):
        return float(np.max(np.abs(self.watermark_corr_avg)))

    def as_dict(self):
        return {
            "pass": self.passed,
            "eta_A_bar": self.eta_A_bar,
            "worst_step_A_bar": self.worst_step_A_bar,
            "eta_A_under": self.eta_A_under,
            "worst_step_A_under": self.worst_step_A_under,
            "eta_B": self.eta_B,
            "eta_C": self.eta_C,
            "eta_L": self.eta_L,
            "eta_w": self.eta_w,
            "eta_z": self.eta_z,
            "eta_V": self.eta_V,
            "eta_delta": self.eta_delta,
            "watermark_corr_max": self.watermark_corr_max,
            "watermark_corr_avg": self.watermark_corr_avg.tolist(),
        }


def _norms(stack):
    stack = np.asarray(stack, float)
    if stack.size == 0:
        return np.zeros(len(stack))
    return np.linalg.norm(stack, ord=2, axis=(1, 2))


def verify_assumptions(scenario, normalization=None):
    """Spectral-norm bounds over the horizon and the finite watermark-correlation average."""
    from .detector import analytic_normalization

    sch, noise, gains = scenario.schedule, scenario.noise, scenario.gains
    if normalization is None:
        normalization = analytic_normalization(scenario)
    N = sch.horizon
    ab = _norms(sch.closed_loop(gains))
    au = _norms(sch.observer_loop(gains))
    corr = (sch.C[1:] @ sch.B[:-1]).sum(axis=0) / N if N > 1 else np.zeros((sch.r, sch.q))
    sd = normalization.Sigma_delta
    return AssumptionReport(
        eta_A_bar=float(ab.max()),
        eta_A_under=float(au.max()),
        eta_B=float(_norms(sch.B).max()),
        eta_C=float(_norms(sch.C).max()),
        eta_L=float(_norms(gains.L[:N]).max()),
        eta_w=float(_norms(noise.Sw[:N]).max()),
        eta_z=float(_norms(noise.Sz[:N]).max()),
        eta_V=float(_norms(normalization.V[:N]).max()),
        eta_delta=float(_norms(sd).max()) if sd is not None else float("nan"),
        watermark_corr_avg=corr,
        worst_step_A_bar=int(ab.argmax()),
        worst_step_A_under=int(au.argmax()),
    )


def compute_kprime(A, B, C, K, max_k=None):
    """Smallest ``k`` with ``C (A + B K)^k B != 0``, or ``None`` up to ``max_k`` (default ``p``)."""
    A, B, C, K = (np.atleast_2d(np.asarray(m, float)) for m in (A, B, C, K))
    max_k = A.shape[0] if max_k is None else max_k
    Ab = A + B @ K
    M = B.copy()
    for k in range(max_k + 1):
        if np.linalg.norm(C @ M, 2) > KPRIME_TOL:
            return k
        M = Ab @ M
    return None


# --------------------------------------------------------------------------- coordinates


def transform_state(scenario, T):
    """Re-express a scenario in time-varying state coordinates ``x' = T[n] x``.

    ``T`` has ``N + 1`` entries.  Measurements are untouched (``C' = C T^-1``),
    so residuals, normalization and the detector metric are unchanged.
    """
    sch, noise, gains = scenario.schedule, scenario.noise, scenario.gains
    N = sch.horizon
    T = np.asarray(T, float)
    Ti = np.linalg.inv(T)
    A = T[1:] @ sch.A @ Ti[:N]
    B = T[1:] @ sch.B
    C = sch.C @ Ti[:N]
    K = gains.K[:N] @ Ti[:N]
    L = T[1:] @ gains.L[:N]
    Sw = T[1:] @ noise.Sw[:N] @ np.swapaxes(T[1:], 1, 2)
    Sw = 0.5 * (Sw + np.swapaxes(Sw, 1, 2))
    return Scenario(
        StateSpaceSchedule(A, B, C, sch.dt),
        NoiseSchedule(Sw, noise.Sz[:N].copy(), noise.Se),
        GainSchedule(K, L),
        scenario.name,
    )


def cost_coordinates(P):
    """``T[n] = P[n]^{1/2}``: coordinates in which the LQR closed loop is a strict contraction."""
    return np.stack([psd_sqrt(p, f"P[{n}]") for n, p in enumerate(P)])


# --------------------------------------------------------------------------- car scenario


@dataclass(frozen=True)
class CarParams:
    dt: float = 0.05
    duration: float = 60.0
    speed_mean: float = 10.0
    speed_amplitude: float = 5.0
    speed_period: float = 30.0
    heading_amplitude: float = 0.3
    heading_period: float = 20.0
    speed_floor: float = 1.0
    q_diag: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    r_diag: tuple = (1.0, 1.0)
    process_base: tuple = (1e-4, 1e-4, 1e-4, 1e-4, 1e-4)
    measurement_base: tuple = (1e-6, 1e-6, 1e-6, 1e-6, 1e-6)
    watermark: tuple = (0.1, 0.1)
    noise_floor: float = 0.1
    realization: str = "lyapunov"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.realization not in ("lyapunov", "physical"):
            raise ValueError(f"unknown realization {self.realization!r}")


def as_covariance(spec, size, name):
    m = np.asarray(spec, float)
    if m.ndim == 1:
        m = np.diag(m)
    if m.shape != (size, size):
        raise ValueError(f"{name} must be {size} diagonal entries or a {size}x{size} matrix")
    return m


@dataclass
class CarScenario:
    scenario: Scenario
    physical: Scenario
    trajectory: ReferenceTrajectory
    cost_to_go: np.ndarray
    noise_scale: np.ndarray
    params: CarParams


def noise_scale(speed, floor=0.1):
    """Per-step multiplier ``max(|v| / mean|v|, floor)`` for speed-proportional noise."""
    v = np.abs(np.asarray(speed, float))
    return np.maximum(v / v.mean(), floor)


def build_car_scenario(params=None):
    """Linearize, discretize and close the loop around the weaving reference.

    The physical realization uses SI states with full-state measurement.  The
    default ``lyapunov`` realization re-expresses it in ``P[n]^{1/2}``
    coordinates of the LQR cost-to-go, where the closed loop contracts in the
    spectral norm at every step; the measured signals are identical.
    """
    params = params or CarParams()
    traj = weaving_trajectory(params.dt, params.duration, params.speed_mean, params.speed_amplitude,
                              params.speed_period, params.heading_amplitude, params.heading_period,
                              params.speed_floor)
    Ac, Bc = linearize_unicycle(traj)
    A, B = discretize_zoh(Ac, Bc, params.dt)
    N = len(traj)
    C = np.broadcast_to(np.eye(5), (N, 5, 5)).copy()
    sch = StateSpaceSchedule(A, B, C, params.dt)

    scale = noise_scale(traj.speed, params.noise_floor)
    Sw = scale[:, None, None] * as_covariance(params.process_base, 5, "process_base")
    Sz = scale[:, None, None] * as_covariance(params.measurement_base, 5, "measurement_base")
    Se = as_covariance(params.watermark, 2, "watermark")
    noise = NoiseSchedule(Sw, Sz, Se)

    Q = as_covariance(params.q_diag, 5, "q_diag")
    R = as_covariance(params.r_diag, 2, "r_diag")
    K, P = riccati_backward(sch, Q, R, stationary_cost(A[-1], B[-1], Q, R))
    L = observer_gains(sch, noise, P0=Sw[0])
    physical = Scenario(sch, noise, GainSchedule(K, L), "car")
    realized = physical if params.realization == "physical" else transform_state(physical, cost_coordinates(P))
    return CarScenario(realized, physical, traj, P, scale, params)


def lti_scenario(A, B, C, Sw, Sz, Se, horizon, dt=1.0, Q=None, R=None, K=None, L=None, name="lti"):
    """Time-invariant scenario with stationary LQR/Kalman gains unless gains are given."""
    A, B, C = (np.atleast_2d(np.asarray(m, float)) for m in (A, B, C))
    Sw, Sz, Se = (np.atleast_2d(np.asarray(m, float)) for m in (Sw, Sz, Se))
    p, q = B.shape
    r = C.shape[0]
    if K is None:
        Q = np.eye(p) if Q is None else np.atleast_2d(Q)
        R = np.eye(q) if R is None else np.atleast_2d(R)
        P = solve_discrete_are(A, B, Q, R)
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if L is None:
        Pk = solve_discrete_are(A.T, C.T, Sw, Sz)
        L = -A @ Pk @ C.T @ np.linalg.inv(C @ Pk @ C.T + Sz)
    K = np.atleast_2d(np.asarray(K, float))
    L = np.atleast_2d(np.asarray(L, float))

    def rep(m):
        return np.broadcast_to(m, (horizon,) + m.shape).copy()

    return Scenario(
        StateSpaceSchedule(rep(A), rep(B), rep(C), dt),
        NoiseSchedule(rep(Sw), rep(Sz), Se),
        GainSchedule(rep(K), rep(L)),
        name,
    )
