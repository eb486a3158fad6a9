"""Monte Carlo checks of the asymptotic detection guarantees on small systems.

"Converges in probability" is operationalized as a replicated-average norm
that decays across a ladder of sample sizes.  The thresholds below are
repository constants, not derived quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .attack import AttackConfig, replay_preset
from .detector import (
    DetectorConfig,
    analytic_normalization,
    prefix_statistics,
    psi_series,
    wishart_metric,
)
from .synthesis import lti_scenario
from .system import child_seed, rng_for, simulate

DECAY_EXPONENT_MAX = -0.3
SEPARATION_FACTOR = 10.0
C1_TOL = 0.02
C2_TOL = 0.05
DEFAULT_SIZES = (1_000, 10_000, 100_000)


@dataclass
class ConvergenceReport:
    statistic: str
    sizes: list
    values: list
    exponent: float
    tolerance: float
    verdict: str = field(init=False)

    def __post_init__(self):
        ok = self.values[-1] < self.tolerance and self.exponent <= DECAY_EXPONENT_MAX
        self.verdict = "converging" if ok else "non-converging"

    @property
    def converging(self):
        return self.verdict == "converging"

    def as_dict(self):
        return {
            "statistic": self.statistic,
            "sizes": list(self.sizes),
            "norms": [float(v) for v in self.values],
            "exponent": float(self.exponent),
            "tolerance": self.tolerance,
            "verdict": self.verdict,
        }


def fit_decay_exponent(sizes, values):
    """Least-squares slope of ``log(values)`` against ``log(sizes)``."""
    slope, _ = np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(values, float)), 1)
    return float(slope)


def scalar_scenario(horizon=DEFAULT_SIZES[-1], a=0.9, b=1.0, c=1.0, sw=1.0, sz=1.0, se=1.0):
    """Scalar LTI loop with stationary LQR and Kalman gains (``Q = R = 1``).

    The open loop is stable so that attacks which cut the feedback path
    (``alpha = -1``) leave the true state bounded.
    """
    return lti_scenario([[a]], [[b]], [[c]], [[sw]], [[sz]], [[se]], horizon, name="scalar")


def _replicated_norms(scenario, attack, sizes, replications, root_seed, normalization):
    r = scenario.schedule.r
    c1 = np.zeros((replications, len(sizes)))
    c2 = np.zeros((replications, len(sizes)))
    for j in range(replications):
        trace = simulate(scenario, attack, horizon=max(sizes), seed=child_seed(root_seed, j))
        for k, (a, b) in enumerate(prefix_statistics(trace, normalization, sizes)):
            c1[j, k] = np.linalg.norm(a, 2)
            c2[j, k] = np.linalg.norm(b - np.eye(r), 2)
    return c1.mean(axis=0), c2.mean(axis=0)


def check_c1_c2(scenario, attack=None, sample_sizes=DEFAULT_SIZES, replications=30, root_seed=0,
                normalization=None):
    """Replicated sample averages of the watermark-correlation and covariance statistics."""
    sizes = sorted(int(s) for s in sample_sizes)
    if normalization is None:
        normalization = analytic_normalization(scenario, max(sizes))
    v1, v2 = _replicated_norms(scenario, attack, sizes, replications, root_seed, normalization)
    return (
        ConvergenceReport("C1", sizes, list(v1), fit_decay_exponent(sizes, v1), C1_TOL),
        ConvergenceReport("C2", sizes, list(v2), fit_decay_exponent(sizes, v2), C2_TOL),
    )


def noise_attack(scenario, alpha, omega_scale=1.0, zeta_scale=1.0, start_step=0):
    """Attack whose false-state noises are scaled copies of the loop's own noises."""
    n = scenario.horizon
    return AttackConfig(alpha, omega_scale * scenario.noise.Sw[:n], zeta_scale * scenario.noise.Sz[:n], start_step)


def check_alpha_iff_c1(scenario, alphas=(0.0, -1.0, 0.5), sample_sizes=DEFAULT_SIZES, replications=30,
                       root_seed=0):
    """C1 behaviour across attack scaling factors with nonzero false-state noise.

    ``alpha = 0`` must converge; every other alpha must plateau above
    ``SEPARATION_FACTOR`` times the ``alpha = 0`` norm at the largest size.
    """
    sizes = sorted(int(s) for s in sample_sizes)
    norm = analytic_normalization(scenario, max(sizes))
    reports = {}
    for alpha in alphas:
        c1, _ = check_c1_c2(scenario, noise_attack(scenario, alpha), sizes, replications, root_seed, norm)
        reports[float(alpha)] = c1
    if 0.0 not in reports:
        base, _ = check_c1_c2(scenario, noise_attack(scenario, 0.0), sizes, replications, root_seed, norm)
    else:
        base = reports[0.0]
    separated = {
        a: rep.values[-1] > SEPARATION_FACTOR * base.values[-1] for a, rep in reports.items() if a != 0.0
    }
    ok = base.converging and all(separated.values()) and all(
        not rep.converging for a, rep in reports.items() if a != 0.0
    )
    return {"reports": reports, "separated": separated, "consistent": bool(ok)}


@dataclass
class WishartReport:
    window: int
    num_windows: int
    mean_Q: np.ndarray
    reference: np.ndarray
    mean_rel_dev: float
    ks_distance: float
    ks_pvalue: float

    def as_dict(self):
        return {
            "window": self.window,
            "num_windows": self.num_windows,
            "mean_Q": self.mean_Q.tolist(),
            "reference": self.reference.tolist(),
            "mean_rel_dev": self.mean_rel_dev,
            "ks_distance": self.ks_distance,
            "ks_pvalue": self.ks_pvalue,
        }


def relative_deviation(mean, reference):
    """``max |mean - ref|_ij / sqrt(ref_ii ref_jj)``: elementwise error on the reference's own scale."""
    d = np.sqrt(np.diag(reference))
    return float(np.max(np.abs(mean - reference) / np.outer(d, d)))


def disjoint_windows(psi, window):
    m = len(psi) // window
    blocks = psi[: m * window].reshape(m, window, -1)
    return np.einsum("mki,mkj->mij", blocks, blocks)


def check_wishart_window(scenario, window=20, num_windows=10_000, burn_in=200, seed=0, dof=None):
    """Compare disjoint-window ``Q`` matrices with the Wishart(``S``, ``dof``) law.

    ``dof`` defaults to the window length.  The metric samples are compared
    with metrics of matrices drawn directly from the Wishart distribution by
    a two-sample Kolmogorov-Smirnov test.
    """
    dof = window if dof is None else dof
    horizon = burn_in + window * num_windows + 1
    if horizon > scenario.horizon:
        raise ValueError(f"scenario horizon {scenario.horizon} too short for {num_windows} windows")
    norm = analytic_normalization(scenario, horizon)
    config = DetectorConfig(window, scenario.noise.Se, scenario.schedule.r)
    trace = simulate(scenario, horizon=horizon, seed=seed)
    psi = psi_series(trace, norm, config.delay)[burn_in:]
    Q = disjoint_windows(psi, window)
    S, s_inv, coef = config.S, config.S_inv, config.coef
    observed = np.array([wishart_metric(q, s_inv, coef)[0] for q in Q])
    synth = stats.wishart(df=dof, scale=S).rvs(size=len(Q), random_state=rng_for(seed + 1))
    synth = synth.reshape(len(Q), config.dim, config.dim)
    oracle = np.array([wishart_metric(q, s_inv, coef)[0] for q in synth])
    ks = stats.ks_2samp(observed, oracle)
    mean_Q = Q.mean(axis=0)
    ref = dof * S
    return WishartReport(window, len(Q), mean_Q, ref, relative_deviation(mean_Q, ref),
                         float(ks.statistic), float(ks.pvalue))


def run_suite(scenario=None, sample_sizes=DEFAULT_SIZES, replications=30, root_seed=0, window=20,
              num_windows=10_000):
    """All checks with their expected verdicts; ``ok`` is False on any mismatch."""
    scenario = scenario or scalar_scenario(max(max(sample_sizes), 200 + window * num_windows + 1))
    results = []

    c1, c2 = check_c1_c2(scenario, None, sample_sizes, replications, root_seed)
    results.append(("no_attack", [c1, c2], c1.converging and c2.converging))

    r1, r2 = check_c1_c2(scenario, replay_preset(scenario), sample_sizes, replications, root_seed)
    results.append(("replay", [r1, r2], not (r1.converging and r2.converging)))

    z1, z2 = check_c1_c2(scenario, noise_attack(scenario, 0.0, omega_scale=0.0, zeta_scale=4.0),
                         sample_sizes, replications, root_seed)
    results.append(("zeta_inflated", [z1, z2], z1.converging and not z2.converging))

    alpha = check_alpha_iff_c1(scenario, (0.0, -1.0, 0.5), sample_sizes, replications, root_seed)
    results.append(("alpha_iff_c1", list(alpha["reports"].values()), alpha["consistent"]))

    w = check_wishart_window(scenario, window, num_windows, seed=root_seed)
    results.append(("wishart_window", [w], w.mean_rel_dev < 0.05 and w.ks_distance < 0.05))

    return {"checks": results, "ok": all(ok for _, _, ok in results)}
