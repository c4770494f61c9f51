"""Compare the compiled and numpy kernels on typical workloads.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from panoworld import kernels


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def workloads(rng):
    # equirect lookup for a 1024^2 view from a 2048x1024 panorama
    pano = rng.random((1024, 2048, 3)) * 255
    x = rng.random(1024 * 1024) * 2048 - 0.5
    y = rng.random(1024 * 1024) * 1023
    yield "bilinear 1024^2 from 2048x1024", lambda: kernels.bilinear(pano, x, y, wrap_x=True)
    # z-buffer of 2M splats into a 1024^2 view
    n = 2_000_000
    pix = rng.integers(0, 1024 * 1024, n)
    depth = rng.random(n) * 10
    ids = np.arange(n)
    yield "zbuffer 2M points -> 1024^2", lambda: kernels.zbuffer(pix, depth, ids, 1024 * 1024)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.compiled_available():
        print("compiled kernels not built; only the numpy backend is timed")
    rng = np.random.default_rng(0)
    print(f"{'workload':34s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}")
    for name, fn in workloads(rng):
        kernels.use_backend("python")
        tp = _time(fn, args.repeat)
        ref = fn()
        if kernels.compiled_available():
            kernels.use_backend("compiled")
            tc = _time(fn, args.repeat)
            out = fn()
            pairs = zip(ref, out) if isinstance(ref, tuple) else [(ref, out)]
            same = all(np.array_equal(a, b) for a, b in pairs)
            print(f"{name:34s} {tp * 1e3:9.1f}ms {tc * 1e3:9.1f}ms {tp / tc:7.1f}x{'' if same else '  MISMATCH'}")
        else:
            print(f"{name:34s} {tp * 1e3:9.1f}ms {'-':>10s}")


if __name__ == "__main__":
    main()
