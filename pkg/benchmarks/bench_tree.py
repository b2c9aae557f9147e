"""Time the compiled split search against the NumPy fallback.

    python benchmarks/bench_tree.py --rows 20000 --cols 20 --repeat 5
"""

import argparse
import time

import numpy as np

from crimeflow.ml import _split_py, kernels, tree
from crimeflow.ml.ensemble import fit_rf
from crimeflow.ml.tree import Binner, TreeParams


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20_000)
    ap.add_argument("--cols", type=int, default=20)
    ap.add_argument("--bins", type=int, default=64)
    ap.add_argument("--trees", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(args.rows, args.cols))
    y = np.sin(x[:, 0]) + x[:, 1] * x[:, 2] + 0.1 * rng.normal(size=args.rows)
    binner = Binner(x, args.bins)
    codes = binner.transform(x)
    rows = np.arange(args.rows, dtype=np.intp)
    cols = np.arange(args.cols, dtype=np.intp)

    kernels_to_run = {"python": _split_py.best_split}
    if kernels.BACKEND == "cython":
        kernels_to_run["cython"] = kernels.best_split
    else:
        print("compiled kernel not built; timing the fallback only")

    print(f"{args.rows} rows x {args.cols} cols, {args.bins} bins, best of {args.repeat}")
    split_t, forest_t = {}, {}
    for name, fn in kernels_to_run.items():
        split_t[name] = best_of(lambda: fn(codes, y, rows, cols, binner.n_bins, 8), args.repeat)
        tree.best_split = fn  # fit_regression_tree looks the kernel up at call time
        try:
            forest_t[name] = best_of(lambda: fit_rf(x, y, TreeParams(max_depth=8), k=args.trees, rng=1),
                                     max(1, args.repeat // 2))
        finally:
            tree.best_split = kernels.best_split
        print(f"  {name:<7} root split {1e3 * split_t[name]:8.2f} ms   "
              f"forest of {args.trees} {forest_t[name]:7.2f} s")
    if len(split_t) == 2:
        print(f"speed-up: split {split_t['python'] / split_t['cython']:.1f}x, "
              f"forest {forest_t['python'] / forest_t['cython']:.1f}x")


if __name__ == "__main__":
    main()
