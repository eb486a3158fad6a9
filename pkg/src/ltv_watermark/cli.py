"""Command-line pipeline: synth -> calibrate -> detect / compare, plus validate.

Artifacts go under ``<out>/<subcommand>/``.  Every output is written
atomically and depends only on the config and seed, so reruns are
byte-identical.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import _backend
from .attack import AttackConfig, attack_power, replay_preset
from .config import ConfigError, default_config_path, load_config
from .detector import (
    DetectorConfig,
    NormalizationSchedule,
    alarm_events,
    analytic_normalization,
    calibrate_threshold,
    estimate_normalization_ensemble,
    false_alarm_rate,
    first_alarm_after,
    lti_baseline_normalization,
    required_samples,
    score_trace,
)
from .io import atomic_write_text, key_value_text, matrix_csv, read_json, table_csv, write_json
from .synthesis import STATE_NAMES, as_covariance, build_car_scenario, verify_assumptions
from .system import child_seed, simulate
from .validation import run_suite, scalar_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSUMPTION = 3
EXIT_VALIDATION = 4

# Independent seed streams per ensemble.
STREAM_CALIBRATE = 0
STREAM_HOLDOUT = 1
STREAM_DETECT = 2
STREAM_COMPARE = 3

EVENT_PERIOD = 50.0  # seconds; event rates are reported per this interval


class PipelineError(Exception):
    """Missing or stale artifacts; maps to the config-error exit code."""


def _say(msg):
    print(msg, file=sys.stderr)


def _dirs(cfg):
    root = Path(cfg.out)
    return {k: root / k for k in ("synth", "calibrate", "detect", "compare", "validate")}


def _detector(cfg, scenario, threshold=math.inf):
    return DetectorConfig(cfg.window, scenario.noise.Se, scenario.schedule.r, threshold)


def _ensemble(scenario, seeds, attack=None):
    """Simulate one trace per seed; order follows ``seeds`` regardless of scheduling."""
    def run(seed):
        return simulate(scenario, attack, seed=seed)

    workers = min(len(seeds), os.cpu_count() or 1)
    if workers <= 1:
        return [run(s) for s in seeds]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(run, seeds))


def _seeds(cfg, stream, count):
    return [child_seed(cfg.seed, stream, j) for j in range(count)]


def _require(path, hint):
    if not Path(path).exists():
        raise PipelineError(f"missing artifact {path}; run '{hint}' first")


def _check_hash(cfg, meta, path, key="config_hash"):
    found = meta.get(key)
    want = cfg.synth_hash() if key == "synth_hash" else cfg.config_hash()
    if found != want:
        step = "synth" if key == "synth_hash" else "calibrate"
        raise PipelineError(
            f"{path} was produced from a different config (hash {str(found)[:12]}, "
            f"current {want[:12]}); rerun {step}"
        )


# --------------------------------------------------------------------------- synth


def cmd_synth(cfg):
    car = build_car_scenario(cfg.car)
    sc = car.scenario
    report = verify_assumptions(sc)
    d = _dirs(cfg)["synth"]
    sch, gains, noise = sc.schedule, sc.gains, sc.noise
    meta = {"config_hash": cfg.config_hash(), "dt": repr(sch.dt), "realization": cfg.car.realization}
    matrix_csv({"A": sch.A, "B": sch.B, "C": sch.C}, d / "schedule.csv", meta)
    matrix_csv({"K": gains.K, "L": gains.L}, d / "gains.csv", meta)
    matrix_csv({"Sigma_w": noise.Sw, "Sigma_z": noise.Sz, "Sigma_e": noise.Se}, d / "noise.csv", meta)
    traj = {"n": np.arange(len(car.trajectory)), "t": np.arange(len(car.trajectory)) * sch.dt}
    for i, name in enumerate(STATE_NAMES):
        traj[name] = car.trajectory.samples[:, i]
    traj["noise_scale"] = car.noise_scale
    table_csv(traj, d / "trajectory.csv")
    rep = report.as_dict()
    write_json(d / "assumptions.json", rep)
    atomic_write_text(d / "assumptions.txt", key_value_text(rep))
    write_json(d / "manifest.json", {
        "config_hash": cfg.config_hash(),
        "synth_hash": cfg.synth_hash(),
        "horizon": sch.horizon,
        "dt": sch.dt,
        "p": sch.p, "q": sch.q, "r": sch.r,
        "assumptions_pass": report.passed,
    })
    print(key_value_text(rep), end="")
    if not report.passed:
        _say("assumption check failed")
        return EXIT_ASSUMPTION
    return EXIT_OK


def _load_synth(cfg):
    d = _dirs(cfg)["synth"]
    _require(d / "manifest.json", "synth")
    _check_hash(cfg, read_json(d / "manifest.json"), d / "manifest.json", "synth_hash")
    return build_car_scenario(cfg.car)


# --------------------------------------------------------------------------- calibrate


def _normalization(cfg, scenario, traces):
    mode = cfg.normalization
    if mode == "analytic":
        return analytic_normalization(scenario)
    if mode == "ensemble":
        return estimate_normalization_ensemble(traces)
    return lti_baseline_normalization(traces)


def cmd_calibrate(cfg):
    car = _load_synth(cfg)
    sc = car.scenario
    dt = sc.dt
    need = required_samples(dt, cfg.target_rate) if cfg.target_rate > 0 else 0
    det = _detector(cfg, sc)
    if cfg.normalization == "ensemble" and cfg.runs < sc.schedule.r:
        raise ConfigError(f"ensemble normalization needs at least r = {sc.schedule.r} runs to be full rank, "
                          f"got {cfg.runs}")
    per_run = sc.horizon - det.delay - det.window + 1
    if need and cfg.runs * per_run < need:
        runs_needed = math.ceil(need / per_run)
        raise ConfigError(
            f"{cfg.runs} runs give {cfg.runs * per_run} metric samples; the "
            f"{1 - dt * cfg.target_rate:.6g} quantile needs {need} (at least {runs_needed} runs)"
        )
    traces = _ensemble(sc, _seeds(cfg, STREAM_CALIBRATE, cfg.runs))
    norm = _normalization(cfg, sc, traces)
    scored = [score_trace(t, norm, det) for t in traces]
    pooled = np.concatenate([t.metric for t in scored])
    threshold = calibrate_threshold(pooled, dt, cfg.target_rate)
    det = det.with_threshold(threshold)

    holdout = [score_trace(t, norm, det) for t in _ensemble(sc, _seeds(cfg, STREAM_HOLDOUT, cfg.runs))]
    cal_rate = false_alarm_rate([t.with_scores(t.metric, t.metric > threshold) for t in scored], det)
    hold_rate = false_alarm_rate(holdout, det)

    d = _dirs(cfg)["calibrate"]
    norm_meta = {"config_hash": cfg.config_hash()}
    mats = {"V": norm.V, "residual_cov": norm.residual_cov}
    if norm.Sigma_delta is not None:
        mats["Sigma_delta"] = norm.Sigma_delta
    matrix_csv(mats, d / "normalization.csv", {**norm_meta, "kind": norm.kind})
    N = sc.horizon
    table_csv({
        "run": np.repeat(np.arange(cfg.runs), N),
        "n": np.tile(np.arange(N), cfg.runs),
        "t": np.tile(np.arange(N) * dt, cfg.runs),
        "metric": pooled,
    }, d / "calibration_metrics.csv")
    summary = {
        "config_hash": cfg.config_hash(),
        "normalization": norm.kind,
        "runs": cfg.runs,
        "seed": cfg.seed,
        "dt": dt,
        "window": cfg.window,
        "target_rate_per_s": cfg.target_rate,
        "quantile": 1 - dt * cfg.target_rate if cfg.target_rate > 0 else 1.0,
        "threshold": threshold if math.isfinite(threshold) else None,
        "pooled_samples": int(np.isfinite(pooled).sum()),
        "calibration_events_per_50s": cal_rate * EVENT_PERIOD,
        "holdout_events_per_50s": hold_rate * EVENT_PERIOD,
        "normalization_identity_error": float(norm.identity_error().max()),
    }
    write_json(d / "threshold.json", summary)
    print(key_value_text(summary), end="")
    return EXIT_OK


def _load_calibration(cfg):
    car = _load_synth(cfg)
    d = _dirs(cfg)["calibrate"]
    _require(d / "threshold.json", "calibrate")
    _require(d / "normalization.csv", "calibrate")
    cal = read_json(d / "threshold.json")
    _check_hash(cfg, cal, d / "threshold.json")
    norm = NormalizationSchedule.from_csv(d / "normalization.csv")
    from .io import read_matrix_csv

    _check_hash(cfg, read_matrix_csv(d / "normalization.csv")[1], d / "normalization.csv")
    threshold = math.inf if cal["threshold"] is None else float(cal["threshold"])
    if norm.horizon < car.scenario.horizon:
        raise PipelineError("normalization schedule is shorter than the scenario horizon")
    return car, norm, threshold


# --------------------------------------------------------------------------- detect


def _to_realized(car, spec, name):
    """Covariance given in physical state coordinates, mapped like the process noise."""
    base = as_covariance(spec, 5, name)
    N = car.scenario.horizon
    phys = np.broadcast_to(base, (N, 5, 5))
    if car.params.realization == "physical":
        return phys.copy()
    from .synthesis import cost_coordinates

    T = cost_coordinates(car.cost_to_go)[1:]
    out = T @ phys @ np.swapaxes(T, 1, 2)
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def build_attack(cfg, car):
    """The configured attack, or ``None``; warns and returns ``None`` when it starts after the run."""
    spec = cfg.attack
    sc = car.scenario
    if spec.mode == "none":
        return None
    start = spec.start_step(sc.dt)
    if start >= sc.horizon:
        _say(f"warning: attack start {spec.start:g} s is beyond the {sc.horizon * sc.dt:g} s horizon; "
             "running without attack")
        return None
    preset = replay_preset(sc, start)
    if spec.mode == "replay":
        return preset
    N = sc.horizon
    omega = preset.Sigma_omega if isinstance(spec.omega, str) else _to_realized(car, spec.omega, "attack omega")
    zeta = preset.Sigma_zeta if isinstance(spec.zeta, str) else np.broadcast_to(
        as_covariance(spec.zeta, sc.schedule.r, "attack zeta"), (N, sc.schedule.r, sc.schedule.r)).copy()
    return AttackConfig(spec.alpha, omega, zeta, start)


def cmd_detect(cfg):
    car, norm, threshold = _load_calibration(cfg)
    sc = car.scenario
    det = _detector(cfg, sc, threshold)
    attack = build_attack(cfg, car)
    traces = _ensemble(sc, _seeds(cfg, STREAM_DETECT, cfg.detect_runs), attack)
    scored = [score_trace(t, norm, det) for t in traces]
    start = None if attack is None else attack.start_step
    dt = sc.dt

    d = _dirs(cfg)["detect"]
    first = scored[0]
    first.to_csv(d / "trace.csv")
    ids = alarm_events(first.alarm, det.window)
    table_csv({
        "n": np.arange(sc.horizon),
        "t": first.time,
        "metric": first.metric,
        "threshold": np.full(sc.horizon, threshold),
        "alarm": first.alarm,
        "alarm_event_id": ids,
    }, d / "metrics.csv")

    rows = {"run": [], "first_alarm_step": [], "delay_s": [], "events": [], "alarm_fraction_after_start": []}
    for j, t in enumerate(scored):
        hit = first_alarm_after(t, start) if start is not None else None
        ev = alarm_events(t.alarm, det.window)
        rows["run"].append(j)
        rows["first_alarm_step"].append(-1 if hit is None else hit)
        rows["delay_s"].append(float("nan") if hit is None else (hit - start) * dt)
        rows["events"].append(int(ev.max() + 1) if len(ev) else 0)
        after = t.alarm[start:] if start is not None else t.alarm[:0]
        rows["alarm_fraction_after_start"].append(float(after.mean()) if len(after) else float("nan"))
    table_csv({k: np.asarray(v) for k, v in rows.items()}, d / "detections.csv")

    delays = np.asarray(rows["delay_s"], float)
    detected = int(np.isfinite(delays).sum())
    events = [(int(ids[n]), int(n)) for n in np.flatnonzero(ids >= 0)]
    spans = {}
    for eid, n in events:
        lo, hi = spans.get(eid, (n, n))
        spans[eid] = (min(lo, n), max(hi, n))
    hit0 = rows["first_alarm_step"][0]
    summary = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "runs": cfg.detect_runs,
        "attack": cfg.attack.mode if attack is not None else "none",
        "alpha": None if attack is None else attack.alpha,
        "attack_start_step": start,
        "attack_start_s": None if start is None else start * dt,
        "threshold": threshold if math.isfinite(threshold) else None,
        "first_alarm_step": None if hit0 < 0 else hit0,
        "first_alarm_s": None if hit0 < 0 else hit0 * dt,
        "delay_s": None if hit0 < 0 else (hit0 - start) * dt,
        "alarm_events": [
            {"id": k, "start_step": lo, "end_step": hi, "start_s": lo * dt, "end_s": hi * dt}
            for k, (lo, hi) in sorted(spans.items())
        ],
        "events_per_50s": false_alarm_rate(scored, det) * EVENT_PERIOD,
        "detected_runs": detected if start is not None else None,
        "median_delay_s": float(np.median(delays[np.isfinite(delays)])) if detected else None,
        "attack_power": attack_power(first),
    }
    write_json(d / "summary.json", summary)
    print(key_value_text({k: v for k, v in summary.items() if k != "alarm_events"}), end="")
    return EXIT_OK


# --------------------------------------------------------------------------- compare


def coefficient_of_variation(series):
    """``std / |mean|`` over the finite entries of a time series."""
    s = np.asarray(series, float)
    s = s[np.isfinite(s)]
    return float(np.std(s) / abs(np.mean(s)))


def compare_modes(scenario, traces, ltv_norm, window):
    """Ensemble-mean metric per step under LTV and LTI normalization, with their CoVs."""
    det = DetectorConfig(window, scenario.noise.Se, scenario.schedule.r)
    lti_norm = lti_baseline_normalization(traces)
    means = {}
    for name, norm in (("ltv", ltv_norm), ("lti", lti_norm)):
        metrics = np.stack([score_trace(t, norm, det).metric for t in traces])
        means[name] = metrics.mean(axis=0)
    cov = {k: coefficient_of_variation(v) for k, v in means.items()}
    return means, cov


def cmd_compare(cfg):
    car, norm, _ = _load_calibration(cfg)
    sc = car.scenario
    if norm.kind == "lti":
        norm = analytic_normalization(sc)
    traces = _ensemble(sc, _seeds(cfg, STREAM_COMPARE, cfg.runs))
    means, cov = compare_modes(sc, traces, norm, cfg.window)
    d = _dirs(cfg)["compare"]
    table_csv({
        "n": np.arange(sc.horizon),
        "t": np.arange(sc.horizon) * sc.dt,
        "ltv_mean_metric": means["ltv"],
        "lti_mean_metric": means["lti"],
    }, d / "compare.csv")
    summary = {
        "config_hash": cfg.config_hash(),
        "runs": cfg.runs,
        "seed": cfg.seed,
        "ltv_normalization": norm.kind,
        "cov_ltv": cov["ltv"],
        "cov_lti": cov["lti"],
        "cov_ratio_ltv_over_lti": cov["ltv"] / cov["lti"],
        "ltv_more_consistent": cov["ltv"] < cov["lti"],
    }
    write_json(d / "compare_summary.json", summary)
    print(key_value_text(summary), end="")
    return EXIT_OK


# --------------------------------------------------------------------------- validate


def cmd_validate(cfg):
    v = cfg.validation
    sizes = tuple(sorted(v.sample_sizes))
    horizon = max(max(sizes), 200 + v.wishart_window * v.wishart_windows + 1)
    result = run_suite(scalar_scenario(horizon), sizes, v.replications, cfg.seed, v.wishart_window,
                       v.wishart_windows)
    d = _dirs(cfg)["validate"]
    lines = []
    for name, reports, ok in result["checks"]:
        body = []
        for k, rep in enumerate(reports):
            body.append(f"[{name}.{k}]")
            body.append(key_value_text(rep.as_dict()))
        atomic_write_text(d / f"{name}.txt", "\n".join(body))
        lines.append(f"{name}: {'ok' if ok else 'MISMATCH'}")
    lines.append(f"overall: {'ok' if result['ok'] else 'MISMATCH'}")
    text = "\n".join(lines) + "\n"
    atomic_write_text(d / "report.txt", text)
    print(text, end="")
    return EXIT_OK if result["ok"] else EXIT_VALIDATION


# --------------------------------------------------------------------------- entry point

COMMANDS = {
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "detect": cmd_detect,
    "compare": cmd_compare,
    "validate": cmd_validate,
}


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="scenario config file (default: bundled car scenario)")
    common.add_argument("--seed", type=_u64)
    common.add_argument("--runs", type=_positive_int, help="Monte Carlo runs (detect: runs to summarize)")
    common.add_argument("--attack", choices=("none", "replay", "custom"))
    common.add_argument("--attack-start", type=float, metavar="SECONDS")
    common.add_argument("--alpha", type=float, help="attack scaling factor (custom attacks)")
    common.add_argument("--normalization", choices=("analytic", "ensemble", "lti"))
    common.add_argument("--out", help="output directory")
    common.add_argument("--backend", choices=["auto"] + _backend.available(), help=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="ltv-watermark", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "build the car scenario and check the stability assumptions",
        "calibrate": "estimate normalization and the alarm threshold from unattacked runs",
        "detect": "simulate with an optional attack and score every step",
        "compare": "ensemble-mean metric under time-varying versus constant normalization",
        "validate": "Monte Carlo checks of the asymptotic guarantees on scalar systems",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def resolve_config(args):
    cfg = load_config(args.config or default_config_path())
    if args.alpha is not None and (args.attack or cfg.attack.mode) != "custom":
        raise ConfigError("--alpha applies to custom attacks; add --attack custom")
    runs = {}
    if args.runs is not None:
        runs = {"detect_runs": args.runs} if args.command == "detect" else {"runs": args.runs}
    return cfg.override(
        seed=args.seed, out=args.out, normalization=args.normalization,
        mode=args.attack, start=args.attack_start, alpha=args.alpha, **runs,
    )


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.backend:
        os.environ["LTV_WATERMARK_BACKEND"] = args.backend
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, PipelineError) as exc:
        _say(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
