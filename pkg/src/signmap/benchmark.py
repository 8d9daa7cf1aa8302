"""Benchmark the numba kernels against the pure-numpy fallback.

Builds a realistic synthetic workload (dense edge set plus a BP problem)
and times each hot kernel under every importable backend.  Run with

    python -m signmap.benchmark [--edges 200000] [--repeat 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from .kernels import available_backends
from .sensor import EPS_R, FOV_EDGE_WIDTH, FOV_HALF_WIDTH


def _workload(n_edges: int, n_obj: int, n_ray: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    ox = rng.uniform(0, 1000, n_edges)
    oy = rng.uniform(0, 1000, n_edges)
    theta = rng.uniform(-np.pi, np.pi, n_edges)
    conf = rng.uniform(0.05, 0.95, n_edges)
    r = rng.uniform(5, 150, n_edges)
    phi = rng.normal(0, 0.1, n_edges)
    px = ox + r * np.cos(theta + phi)
    py = oy + r * np.sin(theta + phi)
    eobj = rng.integers(0, n_obj, n_edges).astype(np.int64)
    eray = rng.integers(0, n_ray, n_edges).astype(np.int64)
    lpsi = rng.uniform(-3, 3, n_edges)
    lpsi_o = rng.uniform(-2, 2, n_obj)
    return ox, oy, theta, conf, px, py, eobj, eray, lpsi, lpsi_o


def _time(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(n_edges: int = 200_000, n_obj: int = 1000, n_ray: int = 10_000,
        repeat: int = 5) -> dict:
    ox, oy, theta, conf, px, py, eobj, eray, lpsi, lpsi_o = _workload(
        n_edges, n_obj, n_ray)
    lmu0 = np.zeros(n_edges)
    lnu0 = np.zeros(n_edges)
    results: dict[str, dict[str, float]] = {}
    for name, mod in available_backends().items():
        timings: dict[str, float] = {}
        fn_logf = lambda m=mod: m.edge_log_f(
            ox, oy, theta, px, py, 0.02, 0.05, 3.0, EPS_R)
        fn_det = lambda m=mod: m.edge_detect(
            ox, oy, theta, conf, px, py, 0.02, 0.8, 1.0, 0.0,
            EPS_R, FOV_HALF_WIDTH, FOV_EDGE_WIDTH)
        fn_bp = lambda m=mod: m.bp_run(
            n_obj, n_ray, eobj, eray, lpsi, lpsi_o, 5, 0.0, 1e-6, lmu0, lnu0)
        fn_logf()  # warm up (numba compiles on first call)
        fn_det()
        fn_bp()
        timings["edge_log_f"] = _time(fn_logf, repeat)
        timings["edge_detect"] = _time(fn_det, repeat)
        timings["bp_run(5 iters)"] = _time(fn_bp, repeat)
        results[name] = timings
    return results


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--edges", type=int, default=200_000)
    p.add_argument("--objects", type=int, default=1000)
    p.add_argument("--rays", type=int, default=10_000)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    results = run(args.edges, args.objects, args.rays, args.repeat)
    kernels = sorted(next(iter(results.values())))
    names = sorted(results)
    width = max(len(k) for k in kernels) + 2
    header = "kernel".ljust(width) + "".join(n.rjust(14) for n in names)
    if len(names) == 2:
        header += "speedup".rjust(12)
    print(f"workload: {args.edges} edges, {args.objects} objects, "
          f"{args.rays} rays (best of {args.repeat})")
    print(header)
    for k in kernels:
        row = k.ljust(width)
        vals = [results[n][k] for n in names]
        row += "".join(f"{v * 1e3:11.2f} ms" for v in vals)
        if len(vals) == 2 and "numba" in names:
            plain = results["numpy"][k]
            fast = results["numba"][k]
            row += f"{plain / fast:11.2f}x"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
