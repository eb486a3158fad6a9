"""Watermarked LTV closed loops: schedules, single steps and full simulations.

The plant, observer and attack recursions are

    x[n+1]    = A x + B K x_hat + B e + w
    y[n]      = C x + z + v
    x_hat[n+1] = (A + B K + L C) x_hat + B e - L y

with the observer error ``x_hat - x`` split into a nominal part driven by
``(w, z)`` and an attack part driven only by ``v``.

Random numbers
--------------
Every trace owns one ``numpy.random.Generator`` backed by PCG64 (a 64-bit
permuted congruential generator), seeded through
``numpy.random.SeedSequence(seed)``.  Standard-normal blocks are drawn in a
fixed order, each as one ``standard_normal((N, dim))`` call::

    w (N, p), z (N, r), e (N, q), omega (N, p), zeta (N, r)

and then coloured per step with the principal square root of the step's
covariance.  The attack blocks are always drawn, so an attacked and an
unattacked trace with the same seed share their process noise, measurement
noise and watermark.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from . import _backend
from .linalg import MatrixError, draw_gaussian, psd_sqrt, psd_sqrt_stack


def _stack(name, value, ndim=3):
    arr = np.ascontiguousarray(np.asarray(value, dtype=float))
    if arr.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class StateSpaceSchedule:
    """Per-step plant matrices ``A[n] (p x p)``, ``B[n] (p x q)``, ``C[n] (r x p)``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "A", _stack("A", self.A))
        object.__setattr__(self, "B", _stack("B", self.B))
        object.__setattr__(self, "C", _stack("C", self.C))
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        n, p, p2 = self.A.shape
        if p != p2:
            raise ValueError(f"A must be square per step, got {self.A.shape}")
        if self.B.shape[:2] != (n, p) or self.C.shape[0] != n or self.C.shape[2] != p:
            raise ValueError(
                f"inconsistent schedule shapes A{self.A.shape} B{self.B.shape} C{self.C.shape}"
            )

    @property
    def horizon(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.A.shape[1]

    @property
    def q(self):
        return self.B.shape[2]

    @property
    def r(self):
        return self.C.shape[1]

    def closed_loop(self, gains):
        """``A[n] + B[n] K[n]`` for every step."""
        return self.A + self.B @ gains.K[: self.horizon]

    def observer_loop(self, gains):
        """``A[n] + L[n] C[n]`` for every step."""
        return self.A + gains.L[: self.horizon] @ self.C

    def truncate(self, horizon):
        return StateSpaceSchedule(self.A[:horizon], self.B[:horizon], self.C[:horizon], self.dt)


@dataclass(frozen=True)
class NoiseSchedule:
    """Process noise ``Sw[n]``, measurement noise ``Sz[n]`` and the fixed watermark covariance ``Se``.

    Only symmetry and positive semidefiniteness are enforced here, so that
    degenerate zero-noise loops can be simulated; :meth:`require_definite`
    applies the strict check used by gain synthesis.
    """

    Sw: np.ndarray
    Sz: np.ndarray
    Se: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Sw", _stack("Sw", self.Sw))
        object.__setattr__(self, "Sz", _stack("Sz", self.Sz))
        object.__setattr__(self, "Se", _stack("Se", self.Se, ndim=2))
        psd_sqrt(self.Se, "Se")

    @cached_property
    def w_factor(self):
        return psd_sqrt_stack(self.Sw, "Sw")

    @cached_property
    def z_factor(self):
        return psd_sqrt_stack(self.Sz, "Sz")

    @cached_property
    def e_factor(self):
        return psd_sqrt(self.Se, "Se")

    def require_definite(self):
        for name, stack in (("Sw", self.Sw), ("Sz", self.Sz), ("Se", self.Se[None])):
            w = np.linalg.eigvalsh(stack)
            if np.any(w[:, 0] <= 0.0):
                bad = int(np.argmax(w[:, 0] <= 0.0))
                raise MatrixError(f"{name}[{bad}] is not positive definite")

    def truncate(self, horizon):
        return NoiseSchedule(self.Sw[:horizon], self.Sz[:horizon], self.Se)


@dataclass(frozen=True)
class GainSchedule:
    """Controller gains ``K[n] (q x p)`` (``u = K x_hat``) and observer gains ``L[n] (p x r)``."""

    K: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "K", _stack("K", self.K))
        object.__setattr__(self, "L", _stack("L", self.L))

    def check(self, schedule):
        n, p, q, r = schedule.horizon, schedule.p, schedule.q, schedule.r
        if len(self.K) < n or len(self.L) < n:
            raise ValueError(f"gain schedule shorter than horizon {n}")
        if self.K.shape[1:] != (q, p) or self.L.shape[1:] != (p, r):
            raise ValueError(
                f"gain shapes K{self.K.shape[1:]} L{self.L.shape[1:]} do not match p={p} q={q} r={r}"
            )

    def truncate(self, horizon):
        return GainSchedule(self.K[:horizon], self.L[:horizon])


@dataclass(frozen=True)
class Scenario:
    """Everything needed to simulate one watermarked closed loop."""

    schedule: StateSpaceSchedule
    noise: NoiseSchedule
    gains: GainSchedule
    name: str = "scenario"

    @property
    def horizon(self):
        return self.schedule.horizon

    @property
    def dt(self):
        return self.schedule.dt

    def truncate(self, horizon):
        return Scenario(
            self.schedule.truncate(horizon),
            self.noise.truncate(horizon),
            self.gains.truncate(horizon),
            self.name,
        )


@dataclass(frozen=True)
class SimulationState:
    n: int
    x: np.ndarray
    x_hat: np.ndarray
    delta_bar: np.ndarray
    delta_hat: np.ndarray

    @classmethod
    def zero(cls, p):
        z = np.zeros(p)
        return cls(0, z, z.copy(), z.copy(), z.copy())


def step(schedule, noise, gains, state, e_n, v_n, rng=None, *, w_n=None, z_n=None):
    """Advance the closed loop by one step and return ``(next_state, y_n)``.

    ``w_n`` and ``z_n`` are drawn from ``rng`` unless given explicitly; callers
    that need ``z_n`` before the step (attack generation) draw it themselves.
    """
    n = state.n
    if n < 0 or n >= schedule.horizon:
        raise IndexError(f"step index {n} outside horizon {schedule.horizon}")
    A, B, C = schedule.A[n], schedule.B[n], schedule.C[n]
    K, L = gains.K[n], gains.L[n]
    e_n = np.asarray(e_n, dtype=float)
    v_n = np.asarray(v_n, dtype=float)
    if e_n.shape != (schedule.q,) or v_n.shape != (schedule.r,):
        raise ValueError(f"e_n must have shape ({schedule.q},) and v_n ({schedule.r},)")
    if state.x.shape != (schedule.p,) or state.x_hat.shape != (schedule.p,):
        raise ValueError(f"state vectors must have shape ({schedule.p},)")
    if w_n is None:
        w_n = draw_gaussian(noise.Sw[n], rng)
    if z_n is None:
        z_n = draw_gaussian(noise.Sz[n], rng)

    y = C @ state.x + z_n + v_n
    x_next = A @ state.x + B @ (K @ state.x_hat) + B @ e_n + w_n
    x_hat_next = A @ state.x_hat + B @ (K @ state.x_hat) + L @ (C @ state.x_hat) + B @ e_n - L @ y
    a_obs = A + L @ C
    delta_bar = a_obs @ state.delta_bar - w_n - L @ z_n
    delta_hat = a_obs @ state.delta_hat - L @ v_n
    return SimulationState(n + 1, x_next, x_hat_next, delta_bar, delta_hat), y


@dataclass
class DetectionTrace:
    """Per-step record of a simulated run; every array has ``horizon`` rows."""

    dt: float
    x: np.ndarray
    x_hat: np.ndarray
    y: np.ndarray
    e: np.ndarray
    v: np.ndarray
    z: np.ndarray
    delta_bar: np.ndarray
    delta_hat: np.ndarray
    xi: np.ndarray
    residual: np.ndarray
    attack_start: int | None = None
    metric: np.ndarray = field(default=None)
    alarm: np.ndarray = field(default=None)
    flagged: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.x)
        if self.metric is None:
            self.metric = np.full(n, np.nan)
        if self.alarm is None:
            self.alarm = np.zeros(n, dtype=bool)
        if self.flagged is None:
            self.flagged = np.zeros(n, dtype=bool)

    @property
    def horizon(self):
        return len(self.x)

    @property
    def time(self):
        return np.arange(self.horizon) * self.dt

    def with_scores(self, metric, alarm, flagged=None):
        return replace(self, metric=metric, alarm=alarm, flagged=flagged)

    def to_csv(self, path=None):
        """Write one row per step; pending metrics are left empty.

        Floats are written with 17 significant digits, so identical traces give
        identical bytes and values round-trip exactly.
        """
        cols = ["n", "t"]
        blocks = [
            ("x", self.x),
            ("x_hat", self.x_hat),
            ("y", self.y),
            ("e", self.e),
            ("v", self.v),
            ("residual", self.residual),
        ]
        for name, arr in blocks:
            cols += [f"{name}{i}" for i in range(arr.shape[1])]
        cols += ["metric", "alarm"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        t = self.time
        for n in range(self.horizon):
            row = [str(n), _fmt(t[n])]
            for _, arr in blocks:
                row += [_fmt(v) for v in arr[n]]
            m = self.metric[n]
            row.append("" if np.isnan(m) else _fmt(m))
            row.append("1" if self.alarm[n] else "0")
            writer.writerow(row)
        text = buf.getvalue()
        if path is not None:
            from .io import atomic_write_text

            atomic_write_text(path, text)
        return text


def _fmt(v):
    return format(float(v), ".17g")


def rng_for(seed):
    """The trace generator for ``seed`` (an int or a ``SeedSequence``)."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def child_seed(root_seed, *key):
    """Seed for replication ``key`` under ``root_seed``: ``SeedSequence(root_seed, spawn_key=key)``.

    The CLI keys runs as ``(stream, index)`` so calibration, holdout,
    detection and comparison ensembles never share noise.
    """
    return np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(k) for k in key))


def draw_noise(scenario, horizon, seed, attack=None):
    """Draw and colour all random inputs of one trace in the documented order."""
    sch, noise = scenario.schedule, scenario.noise
    p, q, r = sch.p, sch.q, sch.r
    rng = rng_for(seed)
    gw = rng.standard_normal((horizon, p))
    gz = rng.standard_normal((horizon, r))
    ge = rng.standard_normal((horizon, q))
    gomega = rng.standard_normal((horizon, p))
    gzeta = rng.standard_normal((horizon, r))
    w = np.einsum("nij,nj->ni", noise.w_factor[:horizon], gw)
    z = np.einsum("nij,nj->ni", noise.z_factor[:horizon], gz)
    e = ge @ noise.e_factor.T
    if attack is None:
        omega = np.zeros((horizon, p))
        zeta = np.zeros((horizon, r))
    else:
        omega = np.einsum("nij,nj->ni", attack.omega_factor[:horizon], gomega)
        zeta = np.einsum("nij,nj->ni", attack.zeta_factor[:horizon], gzeta)
    return w, z, e, omega, zeta


def simulate(scenario, attack=None, horizon=None, seed=0, backend=None):
    """Simulate ``horizon`` steps of the watermarked loop, optionally under attack.

    Bit-reproducible for a given seed and backend.  The compiled and Python
    backends agree to floating-point round-off.
    """
    sch, noise, gains = scenario.schedule, scenario.noise, scenario.gains
    horizon = sch.horizon if horizon is None else int(horizon)
    if horizon < 0 or horizon > sch.horizon:
        raise ValueError(f"horizon {horizon} outside schedule length {sch.horizon}")
    gains.check(sch)
    if len(noise.Sw) < horizon or len(noise.Sz) < horizon:
        raise ValueError("noise schedule shorter than horizon")
    if attack is not None:
        attack.check(sch, horizon)
    w, z, e, omega, zeta = draw_noise(scenario, horizon, seed, attack)
    alpha = 0.0 if attack is None else float(attack.alpha)
    start = horizon if attack is None else int(attack.start_step)
    kern = _backend.get(backend)
    x, x_hat, y, v, dbar, dhat, xi = kern.closed_loop(
        sch.A[:horizon], sch.B[:horizon], sch.C[:horizon],
        gains.K[:horizon], gains.L[:horizon],
        w, z, e, omega, zeta, alpha, start,
    )
    residual = np.einsum("nij,nj->ni", sch.C[:horizon], x_hat) - y
    return DetectionTrace(
        dt=sch.dt, x=x, x_hat=x_hat, y=y, e=e, v=v, z=z,
        delta_bar=dbar, delta_hat=dhat, xi=xi, residual=residual,
        attack_start=None if attack is None else int(attack.start_step),
    )
