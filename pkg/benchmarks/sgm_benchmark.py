"""Benchmark the SGM aggregation backends (compiled vs pure numpy).

Usage: python benchmarks/sgm_benchmark.py [--sizes 12x40x24,24x80x32] [--repeats 5]
"""

import argparse
import time

import numpy as np

from bino.kernels import sgm_py

try:
    from bino.kernels import _sgm_cy
except ImportError:
    _sgm_cy = None


def bench(fn, cost, p1, p2, repeats):
    fn(cost, p1, p2)  # warmup
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(cost, p1, p2)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="12x40x24,24x80x32,48x160x24")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'size':>14} {'numpy (ms)':>12} {'cython (ms)':>12} {'speedup':>8}  bit-exact")
    for spec in args.sizes.split(","):
        h, w, nd = (int(x) for x in spec.split("x"))
        cost = rng.random((h, w, nd)).astype(np.float32)
        t_py = bench(sgm_py.aggregate, cost, 0.1, 0.8, args.repeats)
        if _sgm_cy is None:
            print(f"{spec:>14} {t_py * 1e3:12.2f} {'n/a':>12} {'n/a':>8}  n/a")
            continue
        t_cy = bench(_sgm_cy.aggregate, cost, 0.1, 0.8, args.repeats)
        exact = np.array_equal(sgm_py.aggregate(cost, 0.1, 0.8),
                               _sgm_cy.aggregate(cost, 0.1, 0.8))
        print(f"{spec:>14} {t_py * 1e3:12.2f} {t_cy * 1e3:12.2f} "
              f"{t_py / t_cy:8.1f}  {exact}")


if __name__ == "__main__":
    main()
