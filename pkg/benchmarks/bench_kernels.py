#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Run: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from detcid import _kernels_np

try:
    from detcid import _speedups
except ImportError:
    _speedups = None


def timeit(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    inv = np.linalg.inv(np.array([
        [0.96, -0.28, 12.0],
        [0.28, 0.96, -7.0],
        [0.0, 0.0, 1.0],
    ]))
    img = rng.random((411, 711))
    mask = (rng.random((411, 711)) > 0.5).astype(np.uint8)
    src_q = rng.integers(0, 65536, (64, 64)).astype(np.int64)
    block_q = rng.integers(0, 65536, (32, 32)).astype(np.int64)
    ssd_mask = np.zeros((32, 32), dtype=np.uint8)
    ssd_mask[:, :8] = 1
    ssd_mask[:8, :] = 1
    strip = rng.integers(0, 1 << 32, (32, 8)).astype(np.int64)
    hole = np.zeros((411, 711), dtype=np.uint8)
    hole[100:250, 200:500] = 1

    cases = [
        ("warp_bilinear 411x711", "warp_bilinear", (img, inv, 411, 711)),
        ("warp_nearest  411x711", "warp_nearest", (mask, inv, 411, 711)),
        ("ssd_scan 64->32 block", "masked_ssd_scan", (src_q, block_q, ssd_mask)),
        ("seam_cut 32x8", "seam_cut_vertical", (strip,)),
        ("jacobi_sweep 411x711", "jacobi_sweep", (img, hole)),
    ]

    print(f"{'kernel':24s} {'numpy':>12s} {'compiled':>12s} {'speedup':>9s}")
    for label, name, call_args in cases:
        t_np = timeit(getattr(_kernels_np, name), *call_args, repeat=args.repeat)
        if _speedups is None:
            print(f"{label:24s} {t_np * 1e3:10.3f}ms {'n/a':>12s} {'n/a':>9s}")
            continue
        t_c = timeit(getattr(_speedups, name), *call_args, repeat=args.repeat)
        print(f"{label:24s} {t_np * 1e3:10.3f}ms {t_c * 1e3:10.3f}ms {t_np / t_c:8.2f}x")

    # end-to-end: one full-size background quilt through each backend
    from detcid import synthesis

    patch = rng.random((64, 64))
    saved = synthesis.kernels
    try:
        synthesis.kernels = _kernels_np
        t_np = timeit(lambda: synthesis._quilt(patch, 411, 711, 32, 8, np.random.default_rng(1)),
                      repeat=max(1, args.repeat // 2))
        if _speedups is not None:
            synthesis.kernels = _speedups
            t_c = timeit(lambda: synthesis._quilt(patch, 411, 711, 32, 8, np.random.default_rng(1)),
                         repeat=max(1, args.repeat // 2))
            print(f"{'quilt 411x711 (full)':24s} {t_np * 1e3:10.3f}ms {t_c * 1e3:10.3f}ms {t_np / t_c:8.2f}x")
        else:
            print(f"{'quilt 411x711 (full)':24s} {t_np * 1e3:10.3f}ms {'n/a':>12s} {'n/a':>9s}")
    finally:
        synthesis.kernels = saved


if __name__ == "__main__":
    main()
