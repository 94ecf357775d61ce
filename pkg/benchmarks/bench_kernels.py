"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--size 256] [--disp 80] [--repeat 3]

Inputs match the reference scene: an ``size x size x disp`` SGM cost volume
and one ternary factor per foreground triplet of a sphere covering about
a fifth of the image.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from polstereo import _kernels


def _best_of(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--disp", type=int, default=80)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--threads", type=int, default=1, help="threads for the compiled message kernel")
    args = p.parse_args(argv)

    if _kernels._core is None:
        print("compiled kernels are not built; only the fallback is available")
        return 1
    import os

    os.environ["POLSTEREO_NUM_THREADS"] = str(args.threads)
    rng = np.random.default_rng(0)
    cost = rng.integers(0, 256, (args.size, args.size, args.disp)).astype(np.int32)
    T = int(0.2 * args.size * args.size)
    tables = rng.random((T, 6, 6, 6))
    q = [rng.random((T, 6)) for _ in range(3)]

    cases = {
        f"sgm_aggregate {args.size}x{args.size}x{args.disp}": lambda b: _kernels.sgm_aggregate(
            cost, 10, 120, backend=b
        ),
        f"ternary_messages T={T}": lambda b: _kernels.ternary_messages(tables, *q, backend=b),
    }
    print(f"{'kernel':36s} {'cython s':>10s} {'numpy s':>10s} {'speedup':>8s}  identical")
    for name, fn in cases.items():
        same = np.array_equal(fn("cython"), fn("python"))
        tc = _best_of(lambda fn=fn: fn("cython"), args.repeat)
        tp = _best_of(lambda fn=fn: fn("python"), args.repeat)
        print(f"{name:36s} {tc:10.3f} {tp:10.3f} {tp / tc:8.1f}  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
