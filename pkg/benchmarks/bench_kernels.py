"""Compiled vs pure-Python kernel timings on the car scenario.

    python3 benchmarks/bench_kernels.py [--runs 20] [--repeat 3]
"""

import argparse
import time

import numpy as np

from ltv_watermark import _backend
from ltv_watermark.detector import DetectorConfig, analytic_normalization, psi_series
from ltv_watermark.synthesis import build_car_scenario
from ltv_watermark.system import child_seed, draw_noise, simulate


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    sc = build_car_scenario().scenario
    sch, g = sc.schedule, sc.gains
    norm = analytic_normalization(sc)
    det = DetectorConfig(20, sc.noise.Se, sch.r)
    seeds = [child_seed(0, j) for j in range(args.runs)]
    noises = [draw_noise(sc, sc.horizon, s) for s in seeds]
    psis = [psi_series(simulate(sc, seed=s), norm) for s in seeds]

    print(f"backends: {', '.join(_backend.available())}; {args.runs} runs x {sc.horizon} steps")
    results = {}
    for name in _backend.available():
        k = _backend.get(name)

        def loop():
            for w, z, e, om, ze in noises:
                k.closed_loop(sch.A, sch.B, sch.C, g.K, g.L, w, z, e, om, ze, 0.0, sc.horizon)

        def metric():
            for psi in psis:
                k.window_metric(psi, np.ascontiguousarray(det.S_inv), det.window, det.coef, 1024)

        results[name] = (best_of(loop, args.repeat), best_of(metric, args.repeat))
        print(f"{name:>9}: closed_loop {results[name][0] * 1e3:8.2f} ms   window_metric {results[name][1] * 1e3:8.2f} ms")
    if "compiled" in results:
        py, cc = results["python"], results["compiled"]
        print(f"  speedup: closed_loop x{py[0] / cc[0]:.1f}   window_metric x{py[1] / cc[1]:.1f}")


if __name__ == "__main__":
    main()
