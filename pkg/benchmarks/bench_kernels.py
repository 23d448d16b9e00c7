"""Timing comparison of the conv2d kernels: compiled loop nests vs the
pure-numpy tap-loop path. Also reports the max absolute output difference
between the two backends so a speedup never hides a numerical drift.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from segan import kernels


def bench(fn, args, repeat):
    fn(*args)  # warm cache / JIT before timing
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


CASES = [
    # (label, n, h, w, c_in, c_out, k, stride)
    ("seg body 64x64", 4, 64, 64, 16, 32, 3, 2),
    ("seg head 32x32", 4, 32, 32, 32, 32, 3, 1),
    ("disc 64x64", 4, 64, 64, 4, 8, 4, 2),
    ("style 64x64", 4, 64, 64, 16, 16, 3, 1),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5, help="timed repeats per case")
    args = ap.parse_args()

    if not kernels.NUMBA_AVAILABLE:
        print("numba is not importable; nothing to compare")
        return

    rng = np.random.default_rng(0)
    print(f"{'case':<16} {'op':<10} {'numpy':>10} {'numba':>10} {'speedup':>8} {'maxdiff':>10}")
    for label, n, h, w, ci, co, k, stride in CASES:
        x = rng.standard_normal((n, h, w, ci)).astype(np.float32)
        wgt = rng.standard_normal((k, k, ci, co)).astype(np.float32)
        pad = 1

        for op, build in (
            ("forward", lambda b: (kernels.conv2d_forward, (x, wgt, stride, pad))),
            ("bwd_input", None),
            ("bwd_weight", None),
        ):
            if op == "forward":
                fwd_args = (x, wgt, stride, pad)
                runner = kernels.conv2d_forward
            else:
                kernels.set_backend("numpy")
                y = kernels.conv2d_forward(x, wgt, stride, pad)
                g = rng.standard_normal(y.shape).astype(np.float32)
                if op == "bwd_input":
                    runner = kernels.conv2d_bwd_input
                    fwd_args = (g, wgt, (h, w), stride, pad)
                else:
                    runner = kernels.conv2d_bwd_weight
                    fwd_args = (x, g, (k, k), stride, pad)

            kernels.set_backend("numpy")
            t_np = bench(runner, fwd_args, args.repeat)
            out_np = runner(*fwd_args)
            kernels.set_backend("numba")
            t_nb = bench(runner, fwd_args, args.repeat)
            out_nb = runner(*fwd_args)
            kernels.set_backend("auto")

            diff = float(np.max(np.abs(out_np - out_nb)))
            print(
                f"{label:<16} {op:<10} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms"
                f" {t_np / t_nb:>7.1f}x {diff:>10.2e}"
            )


if __name__ == "__main__":
    main()
