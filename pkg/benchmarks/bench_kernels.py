"""Benchmark the numba kernels against the numpy/stdlib fallbacks.

Run:  python benchmarks/bench_kernels.py [--repeats 50]

Times both backends on the shapes these kernels actually see during
training (per-element activations on flattened set batches, row-sums
for pooling, fused Adam updates) and prints the speedup table.  The
active backend for the package itself is chosen by EXNODE_NUMBA at
import time; this script always times both.
"""

import argparse
import time

import numpy as np

from exnode import kernels


def time_call(fn, *args, repeats=50):
    fn(*args)  # warm-up (first numba call compiles)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()

    try:
        numba_impl = kernels.implementations("numba")
    except ImportError:
        print("numba is not importable; nothing to compare")
        return
    numpy_impl = kernels.implementations("numpy")

    rng = np.random.default_rng(0)
    n_el = 64 * 100 * 16            # one training batch, flattened
    x = rng.standard_normal(n_el)
    g = rng.standard_normal(n_el)
    out = np.empty(n_el)
    rows = np.ascontiguousarray(rng.standard_normal((1600, 64)))
    soft = np.ascontiguousarray(rng.standard_normal((6400, 17)))
    soft_out = np.empty_like(soft)
    p = rng.standard_normal(n_el)
    m = np.zeros(n_el)
    v = np.zeros(n_el)

    cases = [
        ("tanh_fwd", (x, out)),
        ("tanh_bwd", (np.tanh(x), g, out)),
        ("sigmoid_fwd", (x, out)),
        ("sigmoid_bwd", (1 / (1 + np.exp(-x)), g, out)),
        ("relu_fwd", (x, out)),
        ("softmax2_fwd", (soft, soft_out)),
        ("softmax2_bwd", (soft_out, soft.copy(), np.empty_like(soft))),
        ("row_fsum", (rows,)),
        ("adam_update", (p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)),
    ]

    print(f"{'kernel':14s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for name, call_args in cases:
        t_np = time_call(numpy_impl[name], *call_args, repeats=args.repeats)
        t_nb = time_call(numba_impl[name], *call_args, repeats=args.repeats)
        print(f"{name:14s} {t_np * 1e3:9.3f}ms {t_nb * 1e3:9.3f}ms "
              f"{t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
