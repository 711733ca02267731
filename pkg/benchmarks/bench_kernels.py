"""Compare the compiled and numpy min-distance kernels.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--threads 1 4]

Each case times ``min_sqdist`` on random data for both backends and checks
that the results agree bit for bit.
"""
import argparse
import time

import numpy as np

from ppshare import kernels

CASES = [
    # (images, patches per image, prototypes, dim)
    (400, 9, 100, 16),      # synthetic benchmark, one full-batch forward pass
    (1000, 9, 100, 16),     # benchmark training + validation set
    (64, 49, 2000, 128),    # 2000-prototype pool on a 7x7 grid, small batch
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, nargs="+", default=[1])
    args = ap.parse_args()
    if kernels._ext is None:
        raise SystemExit("compiled kernel not available; build with `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'case':>22} {'threads':>7} {'cython s':>9} {'numpy s':>9} {'speedup':>8} {'equal':>6}")
    for n, p, m, d in CASES:
        patches = rng.uniform(size=(n, p, d))
        protos = rng.uniform(size=(m, d))
        for t in args.threads:
            fast = kernels._ext.min_sqdist(patches, protos, t)
            slow = kernels.min_sqdist_numpy(patches, protos, t)
            equal = np.array_equal(fast[0], slow[0]) and np.array_equal(fast[1], slow[1])
            tc = best_of(lambda: kernels._ext.min_sqdist(patches, protos, t), args.repeat)
            tn = best_of(lambda: kernels.min_sqdist_numpy(patches, protos, t), args.repeat)
            print(f"{f'{n}x{p}x{d} M={m}':>22} {t:>7} {tc:>9.4f} {tn:>9.4f} {tn / tc:>7.1f}x {str(equal):>6}")


if __name__ == "__main__":
    main()
