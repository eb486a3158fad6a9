"""Generalized replay attacks on the measurement channel.

The attacker adds

    v[n]      = alpha (C x + z) + C xi + zeta
    xi[n+1]   = (A + B K) xi + omega

from ``start_step`` on; before that ``v = 0`` and the false state is zero.
``alpha = -1`` with noise matched to the true loop is a pure replay.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .linalg import draw_gaussian, psd_sqrt_stack


@dataclass(frozen=True)
class AttackConfig:
    alpha: float
    Sigma_omega: np.ndarray
    Sigma_zeta: np.ndarray
    start_step: int = 0

    def __post_init__(self):
        so = np.ascontiguousarray(np.asarray(self.Sigma_omega, dtype=float))
        sz = np.ascontiguousarray(np.asarray(self.Sigma_zeta, dtype=float))
        if so.ndim != 3 or sz.ndim != 3:
            raise ValueError("Sigma_omega and Sigma_zeta must be (N, s, s) stacks")
        object.__setattr__(self, "Sigma_omega", so)
        object.__setattr__(self, "Sigma_zeta", sz)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "start_step", int(self.start_step))
        if self.start_step < 0:
            raise ValueError("start_step must be non-negative")

    @classmethod
    def constant(cls, alpha, sigma_omega, sigma_zeta, horizon, start_step=0):
        """Attack with time-invariant false-state noise covariances."""
        so = np.broadcast_to(np.asarray(sigma_omega, float), (horizon,) + np.shape(sigma_omega))
        sz = np.broadcast_to(np.asarray(sigma_zeta, float), (horizon,) + np.shape(sigma_zeta))
        return cls(alpha, so, sz, start_step)

    @cached_property
    def omega_factor(self):
        return psd_sqrt_stack(self.Sigma_omega, "Sigma_omega")

    @cached_property
    def zeta_factor(self):
        return psd_sqrt_stack(self.Sigma_zeta, "Sigma_zeta")

    def check(self, schedule, horizon=None):
        horizon = schedule.horizon if horizon is None else horizon
        p, r = schedule.p, schedule.r
        if self.Sigma_omega.shape[1:] != (p, p) or self.Sigma_zeta.shape[1:] != (r, r):
            raise ValueError(
                f"attack covariances {self.Sigma_omega.shape[1:]}, {self.Sigma_zeta.shape[1:]} "
                f"do not match p={p}, r={r}"
            )
        if len(self.Sigma_omega) < horizon or len(self.Sigma_zeta) < horizon:
            raise ValueError("attack covariance schedule shorter than horizon")
        _ = (self.omega_factor, self.zeta_factor)

    def with_start(self, start_step):
        return AttackConfig(self.alpha, self.Sigma_omega, self.Sigma_zeta, start_step)


def attack_signal(config, schedule, gains, x_n, z_n, xi_n, rng, n, *, omega_n=None, zeta_n=None):
    """One step of the attack: returns ``(v_n, xi_next)``."""
    if n < 0:
        raise IndexError(f"negative step index {n}")
    r, p = schedule.r, schedule.p
    x_n, z_n, xi_n = (np.asarray(a, dtype=float) for a in (x_n, z_n, xi_n))
    if x_n.shape != (p,) or xi_n.shape != (p,) or z_n.shape != (r,):
        raise ValueError(f"expected x, xi of shape ({p},) and z of shape ({r},)")
    if n < config.start_step:
        return np.zeros(r), np.zeros(p)
    C = schedule.C[n]
    if zeta_n is None:
        zeta_n = draw_gaussian(config.Sigma_zeta[n], rng)
    if omega_n is None:
        omega_n = draw_gaussian(config.Sigma_omega[n], rng)
    v = config.alpha * (C @ x_n + z_n) + C @ xi_n + zeta_n
    a_bar = schedule.A[n] + schedule.B[n] @ gains.K[n]
    return v, a_bar @ xi_n + omega_n


def replay_preset(scenario, start_step=0):
    """Pure replay: ``alpha = -1`` and a false state that mimics the watermarked loop.

    The false-state process noise is ``B Se B^T + Sw`` because the replayed
    loop carried its own watermark; the false measurement noise is ``Sz``.
    """
    sch, noise = scenario.schedule, scenario.noise
    n = sch.horizon
    omega = sch.B @ noise.Se @ np.swapaxes(sch.B, 1, 2) + noise.Sw[:n]
    omega = 0.5 * (omega + np.swapaxes(omega, 1, 2))
    return AttackConfig(-1.0, omega, noise.Sz[:n].copy(), start_step)


def attack_power(trace, window=None):
    """Average ``v^T v`` over the whole trace or its trailing ``window`` steps."""
    v = np.asarray(trace.v if hasattr(trace, "v") else trace, dtype=float)
    if len(v) == 0:
        raise ValueError("empty trace")
    if window is not None:
        v = v[-int(window):]
    return float(np.einsum("ni,ni->", v, v) / len(v))


def running_attack_power(trace):
    """Running average of ``v^T v`` from the first step to each step."""
    v = np.asarray(trace.v, dtype=float)
    return np.cumsum(np.einsum("ni,ni->n", v, v)) / np.arange(1, len(v) + 1)
