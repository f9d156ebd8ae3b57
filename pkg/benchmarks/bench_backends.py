#!/usr/bin/env python3
"""Timing comparison of the compiled and plain-numpy pairwise kernels.

Runs the two raw drift kernels on growing particle counts under each
available backend and prints per-call times with the resulting speedup.
The compiled path is warmed up before timing so JIT compilation is not
billed to the measurement, and both paths are checked against each other
to rounding before any number is reported.

Usage:
    python3 benchmarks/bench_backends.py
    python3 benchmarks/bench_backends.py --sizes 500,2000,8000 --repeats 7
"""

import argparse
import sys
import time

import numpy as np

from mflab import _backend
from mflab._kernels import frozen_drift_raw, mean_field_drift_raw

C, BETA, EPS_CAP, MODE = 0.05, 0.3, 1e-9, 0


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _problem(n, dim, seed=7):
    rng = np.random.default_rng(seed)
    pos = rng.normal(0.0, 1.0, (n, dim))
    src = rng.normal(0.0, 1.0, (n, dim))
    w = np.full(n, 1.0 / n)
    offs = np.zeros((1, dim))
    return pos, src, w, offs


def _time_backend(name, sizes, dim, repeats):
    rows = {}
    prev = _backend.set_backend(name)
    try:
        for n in sizes:
            pos, src, w, offs = _problem(n, dim)
            mean_field_drift_raw(pos, offs, C, BETA, EPS_CAP, MODE)
            frozen_drift_raw(pos, src, w, offs, C, BETA, EPS_CAP, MODE)
            t_mf = _best_of(
                lambda: mean_field_drift_raw(pos, offs, C, BETA, EPS_CAP,
                                             MODE), repeats)
            t_fr = _best_of(
                lambda: frozen_drift_raw(pos, src, w, offs, C, BETA,
                                         EPS_CAP, MODE), repeats)
            rows[n] = (t_mf, t_fr)
    finally:
        _backend.set_backend(prev)
    return rows


def _agreement(sizes, dim):
    worst = 0.0
    for n in sizes:
        pos, src, w, offs = _problem(n, dim)
        outs = {}
        prev = _backend.active_backend()
        try:
            for name in ("numba", "numpy"):
                _backend.set_backend(name)
                outs[name] = (
                    mean_field_drift_raw(pos, offs, C, BETA, EPS_CAP, MODE),
                    frozen_drift_raw(pos, src, w, offs, C, BETA, EPS_CAP,
                                     MODE))
        finally:
            _backend.set_backend(prev)
        for a, b in zip(outs["numba"], outs["numpy"]):
            worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="500,2000,8000",
                    help="comma-separated particle counts")
    ap.add_argument("--dim", type=int, default=1)
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repeats; the best is reported")
    args = ap.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]

    try:
        _backend.set_backend("numba")
        _backend.set_backend(_backend.active_backend())
    except RuntimeError:
        print("numba is not importable here; nothing to compare against.")
        return 1

    print(f"pairwise drift kernels, d={args.dim}, "
          f"best of {args.repeats} runs")
    worst = _agreement(sizes, args.dim)
    print(f"cross-backend agreement: max |diff| = {worst:.3e}\n")

    timings = {name: _time_backend(name, sizes, args.dim, args.repeats)
               for name in ("numba", "numpy")}
    header = (f"{'N':>7}  {'kernel':<12} {'numba':>10} {'numpy':>10} "
              f"{'speedup':>8}")
    print(header)
    print("-" * len(header))
    for n in sizes:
        for idx, label in enumerate(("mean-field", "frozen-law")):
            t_nb = timings["numba"][n][idx]
            t_np = timings["numpy"][n][idx]
            print(f"{n:>7}  {label:<12} {t_nb * 1e3:>8.2f}ms "
                  f"{t_np * 1e3:>8.2f}ms {t_np / t_nb:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
