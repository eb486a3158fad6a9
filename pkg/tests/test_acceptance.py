"""Acceptance criteria 1-10, each at its stated tolerance and runtime limit.

Every test records a one-line verdict that pytest prints in an
"acceptance criteria" section at the end of the run.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

from ltv_watermark import cli
from ltv_watermark.attack import replay_preset
from ltv_watermark.config import default_config_path
from ltv_watermark.detector import (
    DetectorConfig,
    analytic_normalization,
    propagate_error_covariance,
    psi_series,
    wishart_metric,
)
from ltv_watermark.synthesis import build_car_scenario, verify_assumptions
from ltv_watermark.validation import (
    DECAY_EXPONENT_MAX,
    SEPARATION_FACTOR,
    check_c1_c2,
    disjoint_windows,
    noise_attack,
    relative_deviation,
    scalar_scenario,
)
from ltv_watermark.system import rng_for, simulate

from conftest import ACCEPTANCE, random_ltv


def record(num, ok, detail):
    line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[num] = line
    print(line)
    assert ok, line


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


# --------------------------------------------------------------------------- CLI pipeline


def _pipeline(out):
    cfg = str(default_config_path())
    times = {}
    steps = [
        ("synth", []),
        ("calibrate", ["--runs", "100"]),
        ("detect", ["--runs", "100", "--attack", "replay", "--attack-start", "25"]),
        ("compare", ["--runs", "100"]),
    ]
    for name, extra in steps:
        with Timer() as t:
            code = cli.main([name, "--config", cfg, "--out", str(out), "--seed", "2024", *extra])
        assert code == 0, f"{name} exited with {code}"
        times[name] = t.seconds
    return times


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    return out, _pipeline(out)


# --------------------------------------------------------------------------- 1


def test_criterion_01_normalization_identity():
    car = build_car_scenario()
    with Timer() as t:
        norm = analytic_normalization(car.scenario)
        err = norm.identity_error().max()
    assert car.scenario.dt == 0.05
    record(1, err < 1e-9 and t.seconds < 1.0,
           f"max_n |V M V^T - I| = {err:.2e} (< 1e-9), {t.seconds:.3f} s (< 1 s)")


# --------------------------------------------------------------------------- 2


def _explicit_sum(sc, horizon):
    """Sum over i of Phi(n, n-i+1) (Sw + L Sz L^T)[n-i] Phi^T, Phi built by explicit products."""
    sch, noise, g = sc.schedule, sc.noise, sc.gains
    Al = sch.observer_loop(g)
    p = sch.p
    out = np.zeros((horizon, p, p))
    for n in range(horizon):
        total = np.zeros((p, p))
        Phi = np.eye(p)
        for i in range(1, n + 1):
            if i > 1:
                Phi = Phi @ Al[n - i + 1]
            src = noise.Sw[n - i] + g.L[n - i] @ noise.Sz[n - i] @ g.L[n - i].T
            total += Phi @ src @ Phi.T
        out[n] = total
    return out


def test_criterion_02_covariance_recursion():
    rng = np.random.default_rng(2)
    systems = []
    for _ in range(20):
        p = int(rng.integers(3, 6))
        systems.append(random_ltv(rng, p, int(rng.integers(1, 3)), int(rng.integers(1, p + 1)), 50))
    worst = 0.0
    with Timer() as t:
        for sc in systems:
            worst = max(worst, float(np.max(np.abs(propagate_error_covariance(sc) - _explicit_sum(sc, 50)))))
    record(2, worst < 1e-10 and t.seconds < 1.0,
           f"20 random LTV systems, 50 steps: max |recursion - sum| = {worst:.2e} (< 1e-10), {t.seconds:.3f} s (< 1 s)")


# --------------------------------------------------------------------------- 3


def test_criterion_03_wishart_moments():
    """Window of 20 steps (ell = 19) gives mean 20 S; the ell = 20 reading gives 21 S.

    Both readings are checked at 5 %; the KS test uses the 20-step window with
    the matching Wishart(S, 20) oracle.
    """
    num = 10_000
    with Timer() as t:
        sc = scalar_scenario(200 + 21 * num + 1)
        norm = analytic_normalization(sc)
        trace = simulate(sc, seed=3)
        psi = psi_series(trace, norm, 1)[200:]
        out = {}
        for window in (20, 21):
            det = DetectorConfig(window, sc.noise.Se, 1)
            Q = disjoint_windows(psi, window)[:num]
            out[window] = (Q, det, relative_deviation(Q.mean(axis=0), window * det.S))
        Q, det, _ = out[20]
        observed = np.array([wishart_metric(q, det.S_inv, det.coef)[0] for q in Q])
        synth = stats.wishart(df=20, scale=det.S).rvs(size=num, random_state=rng_for(4))
        oracle = np.array([wishart_metric(q, det.S_inv, det.coef)[0] for q in synth])
        ks = stats.ks_2samp(observed, oracle).statistic
    dev20, dev21 = out[20][2], out[21][2]
    ok = dev20 < 0.05 and dev21 < 0.05 and ks < 0.05 and t.seconds < 30
    record(3, ok, f"{num} windows: mean(Q) vs 20 S dev {dev20:.4f}, ell=20 window vs 21 S dev {dev21:.4f} "
                  f"(< 0.05); KS {ks:.4f} (< 0.05); {t.seconds:.1f} s (< 30 s)")


# --------------------------------------------------------------------------- 4 and 5

SIZES = (1_000, 10_000, 100_000)
SCALARS = {"a=0.9": dict(a=0.9), "a=0.5,sw=0.5,sz=2": dict(a=0.5, sw=0.5, sz=2.0)}


@pytest.fixture(scope="module")
def no_attack_reports():
    out = {}
    with Timer() as t:
        for name, kw in SCALARS.items():
            sc = scalar_scenario(SIZES[-1], **kw)
            out[name] = (sc, check_c1_c2(sc, None, SIZES, replications=30, root_seed=5))
    return out, t.seconds


def test_criterion_04_no_attack_convergence(no_attack_reports):
    runs, seconds = no_attack_reports
    reports = {k: v[1] for k, v in runs.items()}
    parts, ok = [], True
    for name, (c1, c2) in reports.items():
        good = (c1.values[-1] < 0.02 and c2.values[-1] < 0.05
                and -0.7 <= c1.exponent <= DECAY_EXPONENT_MAX and -0.7 <= c2.exponent <= DECAY_EXPONENT_MAX)
        ok &= good
        parts.append(f"[{name}] |C1|={c1.values[-1]:.4f} |C2-I|={c2.values[-1]:.4f} "
                     f"exp {c1.exponent:.2f}/{c2.exponent:.2f}")
    record(4, ok and seconds < 60,
           "; ".join(parts) + f" (< 0.02, < 0.05, exponents in [-0.7, -0.3]); {seconds:.1f} s (< 60 s)")


def test_criterion_05_attack_non_convergence(no_attack_reports):
    sc, (base_c1, _) = no_attack_reports[0]["a=0.9"]
    with Timer() as t:
        attacks = {"replay": replay_preset(sc), "alpha=0.5": noise_attack(sc, 0.5)}
        reports = {k: check_c1_c2(sc, a, SIZES, replications=30, root_seed=6) for k, a in attacks.items()}
    parts, ok = [], True
    for name, (c1, _) in reports.items():
        plateau = c1.values[-1] > SEPARATION_FACTOR * base_c1.values[-1]
        ok &= (not c1.converging) and plateau
        parts.append(f"{name}: |C1|@1e5={c1.values[-1]:.3f} ({c1.values[-1] / base_c1.values[-1]:.0f}x no-attack, "
                     f"{c1.verdict})")
    record(5, ok and t.seconds < 60, "; ".join(parts) + f"; {t.seconds:.1f} s (< 60 s)")


# --------------------------------------------------------------------------- 6, 7, 8 via the CLI


def test_criterion_06_false_alarm_calibration(pipeline):
    out, times = pipeline
    th = json.loads((out / "calibrate/threshold.json").read_text())
    rate = th["holdout_events_per_50s"]
    ok = th["runs"] == 100 and th["quantile"] == pytest.approx(0.999) and rate <= 1.5 and times["calibrate"] < 120
    record(6, ok, f"threshold {th['threshold']:.3f} from 100 runs; holdout {rate:.2f} events / 50 s "
                  f"(<= 1.5); {times['calibrate']:.1f} s (< 120 s)")


def test_criterion_07_detection(pipeline):
    out, times = pipeline
    s = json.loads((out / "detect/summary.json").read_text())
    rows = (out / "detect/detections.csv").read_text().splitlines()[1:]
    frac = np.array([float(r.split(",")[4]) for r in rows])
    ok = s["detected_runs"] >= 95 and s["attack_start_s"] == 25.0 and times["detect"] < 120
    record(7, ok, f"replay from 25 s detected in {s['detected_runs']}/100 runs; median delay "
                  f"{s['median_delay_s']:.2f} s; mean alarm fraction after start {frac.mean():.2f}; "
                  f"{times['detect']:.1f} s (< 120 s)")


def test_criterion_08_lti_vs_ltv(pipeline):
    out, times = pipeline
    s = json.loads((out / "compare/compare_summary.json").read_text())
    ok = s["cov_ltv"] < s["cov_lti"] and times["compare"] < 120
    record(8, ok, f"CoV of ensemble-mean metric: LTV {s['cov_ltv']:.4f} < LTI {s['cov_lti']:.4f}; "
                  f"{times['compare']:.1f} s (< 120 s)")


# --------------------------------------------------------------------------- 9


def test_criterion_09_synthesis_soundness():
    with Timer() as t:
        rep = verify_assumptions(build_car_scenario().scenario)
    ok = rep.passed and rep.eta_A_bar < 1 and rep.eta_A_under < 1 and rep.watermark_corr_max > 1e-6
    record(9, ok and t.seconds < 1.0,
           f"max ||A+BK|| = {rep.eta_A_bar:.4f}, max ||A+LC|| = {rep.eta_A_under:.4f}, "
           f"watermark correlation {rep.watermark_corr_max:.4f} (> 1e-6); {t.seconds:.2f} s (< 1 s)")


# --------------------------------------------------------------------------- 10


def test_criterion_10_reproducibility(pipeline, tmp_path):
    out_a, _ = pipeline
    out_b = tmp_path / "run_b"
    _pipeline(out_b)
    csvs = sorted(p.relative_to(out_a) for p in out_a.rglob("*.csv"))
    diffs = [str(p) for p in csvs if (out_a / p).read_bytes() != (out_b / p).read_bytes()]
    record(10, len(csvs) >= 8 and not diffs,
           f"{len(csvs)} CSV files byte-identical across reruns" if not diffs else f"differing: {diffs}")
