#!/usr/bin/env python3
"""Benchmark the compiled kernels against the NumPy fallback.

Runs each hot kernel on desk-scale and paper-scale shapes and prints a
table of per-call times plus the speedup. Invoke from the repo root:

    python benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from dynslim.kernels import numpy_backend as npk

try:
    from dynslim.kernels import cython_backend as ck
except ImportError:
    ck = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def conv_cases(rng, dtype):
    # (label, B, C_in, C_out, K, stride, T)
    shapes = [
        ("conv desk E1", 8, 1, 8, 8, 4, 64000),
        ("conv desk E3", 8, 16, 32, 8, 4, 4000),
        ("conv paper E5", 4, 256, 512, 8, 4, 1024),
        ("pw   desk", 8, 16, 32, 1, 1, 16000),
    ]
    for label, b, ci, co, k, s, t in shapes:
        x = rng.standard_normal((b, ci, t)).astype(dtype)
        w = rng.standard_normal((co, ci, k)).astype(dtype)
        t_out = (t - k) // s + 1
        gy = rng.standard_normal((b, co, t_out)).astype(dtype)
        yield label, x, w, gy, s, k, t


def gru_cases(rng, dtype):
    # (label, B, F, M, T)
    shapes = [
        ("gru desk bottleneck", 8, 32, 2, 1000),
        ("gru paper bottleneck", 4, 512, 4, 250),
        ("diag router", 8, 64, None, 125),
    ]
    for label, b, f, m, t in shapes:
        x = rng.standard_normal((b, f, t)).astype(dtype)
        h0 = np.zeros((b, f), dtype=dtype)
        if m is None:
            w = [rng.standard_normal((3, f)).astype(dtype)
                 for _ in range(4)]
            yield label, "diag", (x, h0, *w)
        else:
            fg = f // m
            w = [rng.standard_normal((m, 3 * fg, fg)).astype(dtype),
                 rng.standard_normal((m, 3 * fg, fg)).astype(dtype),
                 rng.standard_normal((m, 3 * fg)).astype(dtype),
                 rng.standard_normal((m, 3 * fg)).astype(dtype)]
            yield label, "grouped", (x, h0, *w)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--dtype", choices=["float32", "float64"],
                        default="float32")
    args = parser.parse_args()
    if ck is None:
        print("compiled kernels not built; nothing to compare")
        return
    dtype = np.dtype(args.dtype)
    rng = np.random.default_rng(0)
    rows = [("kernel", "numpy", "cython", "speedup")]

    for label, x, w, gy, s, k, t in conv_cases(rng, dtype):
        t_np = timeit(lambda: npk.conv1d_fwd(x, w, s), args.repeats)
        t_c = timeit(lambda: ck.conv1d_fwd(x, w, s), args.repeats)
        rows.append((label + " fwd", f"{t_np * 1e3:.2f} ms",
                     f"{t_c * 1e3:.2f} ms", f"{t_np / t_c:.2f}x"))
        t_np = timeit(lambda: npk.conv1d_bwd_x(gy, w, s, t), args.repeats)
        t_c = timeit(lambda: ck.conv1d_bwd_x(gy, w, s, t), args.repeats)
        rows.append((label + " bwd_x", f"{t_np * 1e3:.2f} ms",
                     f"{t_c * 1e3:.2f} ms", f"{t_np / t_c:.2f}x"))
        t_np = timeit(lambda: npk.conv1d_bwd_w(x, gy, s, k), args.repeats)
        t_c = timeit(lambda: ck.conv1d_bwd_w(x, gy, s, k), args.repeats)
        rows.append((label + " bwd_w", f"{t_np * 1e3:.2f} ms",
                     f"{t_c * 1e3:.2f} ms", f"{t_np / t_c:.2f}x"))

    for label, kind, arrays in gru_cases(rng, dtype):
        np_fwd = npk.gru_fwd if kind == "grouped" else npk.diag_gru_fwd
        c_fwd = ck.gru_fwd if kind == "grouped" else ck.diag_gru_fwd
        np_bwd = npk.gru_bwd if kind == "grouped" else npk.diag_gru_bwd
        c_bwd = ck.gru_bwd if kind == "grouped" else ck.diag_gru_bwd
        t_np = timeit(lambda: np_fwd(*arrays), args.repeats)
        t_c = timeit(lambda: c_fwd(*arrays), args.repeats)
        rows.append((label + " fwd", f"{t_np * 1e3:.2f} ms",
                     f"{t_c * 1e3:.2f} ms", f"{t_np / t_c:.2f}x"))
        gy = np.random.default_rng(1).standard_normal(
            arrays[0].shape).astype(dtype)
        _, cache_np = np_fwd(*arrays)
        _, cache_c = c_fwd(*arrays)
        t_np = timeit(lambda: np_bwd(gy, cache_np), args.repeats)
        t_c = timeit(lambda: c_bwd(gy, cache_c), args.repeats)
        rows.append((label + " bwd", f"{t_np * 1e3:.2f} ms",
                     f"{t_c * 1e3:.2f} ms", f"{t_np / t_c:.2f}x"))

    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())


if __name__ == "__main__":
    main()
