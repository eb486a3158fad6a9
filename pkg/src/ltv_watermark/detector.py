"""Time-varying normalization and the sliding-window Wishart test.

Under no attack the stacked vector

    psi[n] = [ V[n] (C[n] x_hat[n] - y[n]) ; e[n - delay] ]

is approximately ``N(0, S)`` with ``S = blockdiag(I_r, Se)``, so the sum of
``psi psi^T`` over a window of ``ell + 1`` steps is approximately
Wishart(``S``, ``ell + 1``).  The detector scores each window with

    metric(Q) = (q + r - ell) log|Q| + tr(S^-1 Q)

and raises an alarm when it exceeds a calibrated threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from .linalg import MatrixError, inv_sqrt_spd

EIG_FLOOR = 1e-300
RECOMPUTE_EVERY = 1024


# --------------------------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormalizationSchedule:
    """Per-step whitening ``V[n]`` of the residual and the covariance it whitens.

    ``Sigma_delta`` is only present for analytically propagated schedules.
    """

    V: np.ndarray
    residual_cov: np.ndarray
    Sigma_delta: np.ndarray | None = None
    kind: str = "analytic"

    @property
    def horizon(self):
        return len(self.V)

    def identity_error(self):
        """Per-step ``max |V M V^T - I|`` with ``M`` the whitened covariance."""
        r = self.V.shape[1]
        prod = self.V @ self.residual_cov @ np.swapaxes(self.V, 1, 2)
        return np.abs(prod - np.eye(r)).reshape(len(prod), -1).max(axis=1)

    def to_csv(self, path=None):
        from .io import matrix_csv

        mats = {"V": self.V, "residual_cov": self.residual_cov}
        if self.Sigma_delta is not None:
            mats["Sigma_delta"] = self.Sigma_delta
        return matrix_csv(mats, path, meta={"kind": self.kind})

    @classmethod
    def from_csv(cls, path):
        from .io import read_matrix_csv

        mats, meta = read_matrix_csv(path)
        return cls(mats["V"], mats["residual_cov"], mats.get("Sigma_delta"), meta.get("kind", "analytic"))


def propagate_error_covariance(scenario, horizon=None):
    """Nominal observer-error covariance for ``n = 0 .. horizon-1``.

    Starts from zero (the observer starts exact) and follows
    ``S[n+1] = Al S Al^T + Sw[n] + L Sz[n] L^T`` with ``Al = A + L C``.
    """
    sch, noise, gains = scenario.schedule, scenario.noise, scenario.gains
    horizon = sch.horizon if horizon is None else horizon
    p = sch.p
    out = np.zeros((horizon, p, p))
    if horizon == 0:
        return out
    a_obs = sch.observer_loop(gains)
    L = gains.L
    S = np.zeros((p, p))
    for n in range(horizon - 1):
        out[n] = S
        S = a_obs[n] @ S @ a_obs[n].T + noise.Sw[n] + L[n] @ noise.Sz[n] @ L[n].T
        S = 0.5 * (S + S.T)
    out[horizon - 1] = S
    return out


def normalization_factor(sigma_delta, C, Sz):
    """``(C Sigma_delta C^T + Sz)^{-1/2}``, principal root."""
    m = C @ sigma_delta @ C.T + Sz
    return inv_sqrt_spd(0.5 * (m + m.T), "C Sigma_delta C^T + Sz")


def _inv_sqrt_stack(m, name):
    m = 0.5 * (m + np.swapaxes(m, 1, 2))
    w, u = np.linalg.eigh(m)
    if np.any(w[:, 0] <= 0.0):
        k = int(np.argmax(w[:, 0] <= 0.0))
        raise MatrixError(f"{name}[{k}] is not positive definite (min eigenvalue {w[k, 0]:.3e})")
    return (u / np.sqrt(w)[:, None, :]) @ np.swapaxes(u, 1, 2)


def analytic_normalization(scenario, horizon=None):
    """Normalization schedule from the propagated error covariance."""
    sch, noise = scenario.schedule, scenario.noise
    horizon = sch.horizon if horizon is None else horizon
    sd = propagate_error_covariance(scenario, horizon)
    C = sch.C[:horizon]
    M = C @ sd @ np.swapaxes(C, 1, 2) + noise.Sz[:horizon]
    M = 0.5 * (M + np.swapaxes(M, 1, 2))
    return NormalizationSchedule(_inv_sqrt_stack(M, "residual covariance"), M, sd, "analytic")


def _ridge(cov):
    r = cov.shape[-1]
    scale = np.trace(cov, axis1=-2, axis2=-1) / r
    if np.any(scale <= 0.0):
        raise MatrixError("sample residual covariance is identically zero")
    return cov + (1e-9 * scale)[..., None, None] * np.eye(r)


def _residuals(traces):
    res = np.stack([t.residual if hasattr(t, "residual") else t for t in traces])
    if res.ndim != 3:
        raise ValueError("expected residual arrays of shape (N, r)")
    return res


def estimate_normalization_ensemble(traces):
    """Per-step ``V[n]`` from the ensemble residual covariance of unattacked runs."""
    res = _residuals(traces)
    i, N, r = res.shape
    if i < r:
        raise ValueError(f"ensemble of {i} runs cannot estimate a rank-{r} covariance (need >= {r})")
    cov = np.einsum("jni,jnk->nik", res, res) / i
    cov = _ridge(cov)
    return NormalizationSchedule(_inv_sqrt_stack(cov, "ensemble residual covariance"), cov, None, "ensemble")


def lti_baseline_normalization(traces, skip=0):
    """One time-invariant ``V`` from the residual covariance averaged over steps and runs."""
    res = _residuals(traces)[:, skip:]
    i, N, r = res.shape
    if i * N < r:
        raise ValueError(f"{i * N} residual samples cannot estimate a rank-{r} covariance")
    cov = _ridge(np.einsum("jni,jnk->ik", res, res) / (i * N))
    V = inv_sqrt_spd(cov, "average residual covariance")
    total = res.shape[1] + skip
    return NormalizationSchedule(
        np.broadcast_to(V, (total, r, r)).copy(), np.broadcast_to(cov, (total, r, r)).copy(), None, "lti"
    )


# --------------------------------------------------------------------------- window statistic


@dataclass(frozen=True)
class DetectorConfig:
    """Window ``ell + 1`` (at least ``q + r``), watermark covariance, threshold and delay."""

    window: int
    Se: np.ndarray
    r: int
    threshold: float = math.inf
    delay: int = 1

    def __post_init__(self):
        object.__setattr__(self, "Se", np.atleast_2d(np.asarray(self.Se, dtype=float)))
        if self.window < self.q + self.r:
            raise ValueError(f"window {self.window} must be at least q + r = {self.q + self.r}")
        if self.delay < 0:
            raise ValueError("delay must be non-negative")

    @property
    def q(self):
        return self.Se.shape[0]

    @property
    def ell(self):
        return self.window - 1

    @property
    def dim(self):
        return self.q + self.r

    @property
    def S(self):
        d = self.dim
        S = np.zeros((d, d))
        S[: self.r, : self.r] = np.eye(self.r)
        S[self.r:, self.r:] = self.Se
        return S

    @property
    def S_inv(self):
        return np.linalg.inv(self.S)

    @property
    def coef(self):
        return float(self.dim - self.ell)

    def with_threshold(self, threshold):
        return DetectorConfig(self.window, self.Se, self.r, float(threshold), self.delay)


def wishart_metric(Q, S_inv, coef):
    """``coef log|Q| + tr(S^-1 Q)`` for one matrix; ``(value, flagged)``.

    A non-positive determinant is replaced by the eigenvalue floor and flagged.
    """
    Q = 0.5 * (Q + Q.T)
    sign, logdet = np.linalg.slogdet(Q)
    flagged = False
    if not sign > 0:
        w = np.clip(np.linalg.eigvalsh(Q), EIG_FLOOR, None)
        logdet = float(np.sum(np.log(w)))
        flagged = True
    return coef * logdet + float(np.sum(S_inv * Q)), flagged


class WindowStatistic:
    """Streaming sliding-window accumulator of ``psi psi^T``.

    Rank-one update on every push, downdate when the oldest sample leaves, and
    a from-scratch recomputation every ``recompute_every`` pushes.
    """

    def __init__(self, config, recompute_every=RECOMPUTE_EVERY):
        self.config = config
        self.recompute_every = recompute_every
        d = config.dim
        self.buffer = np.zeros((config.window, d))
        self.count = 0
        self.Q = np.zeros((d, d))
        self._since = 0

    @property
    def full(self):
        return self.count >= self.config.window

    def push(self, psi):
        psi = np.asarray(psi, dtype=float)
        w = self.config.window
        slot = self.count % w
        old = self.buffer[slot].copy()
        self.buffer[slot] = psi
        self.count += 1
        self._since += 1
        if self._since >= self.recompute_every:
            self._since = 0
            rows = self.buffer if self.full else self.buffer[: self.count]
            self.Q = rows.T @ rows
        else:
            self.Q += np.outer(psi, psi)
            if self.count > w:
                self.Q -= np.outer(old, old)

    def recomputed(self):
        rows = self.buffer if self.full else self.buffer[: self.count]
        return rows.T @ rows

    def metric(self):
        """``(value, flagged)`` or ``(None, False)`` while the window is filling."""
        if not self.full:
            return None, False
        return wishart_metric(self.Q, self.config.S_inv, self.config.coef)


def make_psi(residual, V, e_delayed):
    return np.concatenate([V @ residual, e_delayed])


def push_and_score(statistic, residual, V_n, e_delayed, config=None):
    """Append one ``psi`` and return ``(metric or None, alarm)``."""
    config = statistic.config if config is None else config
    statistic.push(make_psi(np.asarray(residual, float), np.asarray(V_n, float), np.asarray(e_delayed, float)))
    value, _ = statistic.metric()
    if value is None:
        return None, False
    return value, bool(value > config.threshold)


def psi_series(trace, normalization, delay=1):
    """Rows ``psi[n]`` for ``n = delay .. N-1`` as an ``(N - delay, r + q)`` array."""
    N = trace.horizon
    V = normalization.V[:N]
    if len(V) < N:
        raise ValueError(f"normalization covers {len(V)} steps, trace has {N}")
    white = np.einsum("nij,nj->ni", V[delay:], trace.residual[delay:])
    return np.ascontiguousarray(np.hstack([white, trace.e[: N - delay]]))


def metric_series(trace, normalization, config, backend=None):
    """Metric aligned with trace steps (NaN while pending) and the flagged-window mask."""
    N = trace.horizon
    metric = np.full(N, np.nan)
    flagged = np.zeros(N, dtype=bool)
    if N <= config.delay:
        return metric, flagged
    psi = psi_series(trace, normalization, config.delay)
    kern = _backend.get(backend)
    m, flag = kern.window_metric(psi, np.ascontiguousarray(config.S_inv), config.window, config.coef, RECOMPUTE_EVERY)
    for k in np.flatnonzero(flag):
        rows = psi[k - config.window + 1: k + 1]
        m[k], _ = wishart_metric(rows.T @ rows, config.S_inv, config.coef)
    metric[config.delay:] = m
    flagged[config.delay:] = flag.astype(bool)
    return metric, flagged


def score_trace(trace, normalization, config, backend=None):
    """Trace copy with metric, alarm and flagged columns filled in."""
    metric, flagged = metric_series(trace, normalization, config, backend)
    with np.errstate(invalid="ignore"):
        alarm = np.nan_to_num(metric, nan=-np.inf) > config.threshold
    return trace.with_scores(metric, alarm, flagged)


# --------------------------------------------------------------------------- thresholds and alarms


def required_samples(dt, target_rate):
    """Pooled samples needed for the ``1 - dt * rate`` quantile (ten expected exceedances)."""
    tail = dt * target_rate
    return int(math.ceil(10.0 / tail))


def calibrate_threshold(metric_samples, dt, target_rate):
    """Empirical ``1 - dt * target_rate`` quantile of pooled unattacked metrics.

    ``target_rate`` is in alarms per second; zero disables alarms (infinite threshold).
    """
    if target_rate < 0:
        raise ValueError("target_rate must be non-negative")
    if target_rate == 0:
        return math.inf
    samples = np.asarray(metric_samples, dtype=float).ravel()
    samples = samples[np.isfinite(samples)]
    tail = dt * target_rate
    if not 0 < tail < 1:
        raise ValueError(f"dt * target_rate = {tail} must lie in (0, 1)")
    need = required_samples(dt, target_rate)
    if len(samples) < need:
        raise ValueError(f"{len(samples)} metric samples are too few for the {1 - tail:.6g} quantile; need {need}")
    return float(np.quantile(samples, 1.0 - tail, method="higher"))


def alarm_events(alarm, gap):
    """Event id per step (``-1`` where no alarm); alarms closer than ``gap`` steps share an event."""
    alarm = np.asarray(alarm, dtype=bool)
    ids = np.full(len(alarm), -1, dtype=int)
    event = -1
    last = None
    for n in np.flatnonzero(alarm):
        if last is None or n - last >= gap:
            event += 1
        ids[n] = event
        last = n
    return ids


def count_events(alarm, gap):
    ids = alarm_events(alarm, gap)
    return int(ids.max() + 1) if len(ids) else 0


def false_alarm_rate(traces, config):
    """Alarm events per second of scored (non-pending) run time."""
    events = 0
    seconds = 0.0
    for t in traces:
        scored = np.isfinite(t.metric)
        events += count_events(t.alarm & scored, config.window)
        seconds += scored.sum() * t.dt
    return events / seconds if seconds > 0 else 0.0


def first_alarm_after(trace, start):
    hits = np.flatnonzero(trace.alarm[start:])
    return None if len(hits) == 0 else int(start + hits[0])


# --------------------------------------------------------------------------- asymptotic statistics


def asymptotic_statistics(trace, normalization, delay=1, upto=None):
    """Sample averages of ``V r e[n-delay]^T`` and ``V r r^T V^T`` over the first ``upto`` steps.

    The watermark before the first step is taken as zero.
    """
    i = trace.horizon if upto is None else int(upto)
    V = normalization.V[:i]
    white = np.einsum("nij,nj->ni", V, trace.residual[:i])
    e = np.zeros_like(trace.e[:i])
    e[delay:] = trace.e[: i - delay]
    c1 = white.T @ e / i
    c2 = white.T @ white / i
    return c1, c2


def prefix_statistics(trace, normalization, sizes, delay=1):
    """:func:`asymptotic_statistics` at several prefix lengths from one pass."""
    n = max(sizes)
    V = normalization.V[:n]
    white = np.einsum("nij,nj->ni", V, trace.residual[:n])
    e = np.zeros_like(trace.e[:n])
    e[delay:] = trace.e[: n - delay]
    c1 = np.cumsum(np.einsum("ni,nj->nij", white, e), axis=0)
    c2 = np.cumsum(np.einsum("ni,nj->nij", white, white), axis=0)
    return [(c1[i - 1] / i, c2[i - 1] / i) for i in sizes]
