"""Pure-numpy implementations of the hot kernels.

These mirror the compiled versions in ``detcid._speedups`` operation for
operation. Float expressions keep the same evaluation order as the C code so
both backends produce bit-identical results; the quilting kernels work on
integer-quantized pixels so block and seam selection cannot drift between
backends.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def warp_bilinear(src: np.ndarray, inv: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Inverse-map ``src`` through affine ``inv`` with bilinear sampling.

    ``inv`` maps output (x, y, 1) to source coordinates. Samples falling
    outside the source contribute zero.
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    h, w = src.shape
    yy, xx = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    sx = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
    sy = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    def fetch(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = src[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(valid, vals, 0.0)

    v00 = fetch(y0, x0)
    v01 = fetch(y0, x1)
    v10 = fetch(y1, x0)
    v11 = fetch(y1, x1)
    top = (1.0 - fx) * v00 + fx * v01
    bot = (1.0 - fx) * v10 + fx * v11
    return (1.0 - fy) * top + fy * bot


def warp_nearest(src: np.ndarray, inv: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Inverse-map ``src`` through affine ``inv`` with nearest-neighbor sampling."""
    src = np.ascontiguousarray(src, dtype=np.uint8)
    h, w = src.shape
    yy, xx = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    sx = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
    sy = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]
    xi = np.floor(sx + 0.5).astype(np.int64)
    yi = np.floor(sy + 0.5).astype(np.int64)
    valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    out = src[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(valid, out, np.uint8(0)).astype(np.uint8)


def masked_ssd_scan(src_q: np.ndarray, block_q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """SSD of every (bh, bw) window of ``src_q`` against ``block_q``.

    Only pixels where ``mask`` is nonzero contribute. All inputs are
    integer-quantized so the scan is exact. Returns an int64 grid of shape
    (sh - bh + 1, sw - bw + 1).
    """
    src_q = np.ascontiguousarray(src_q, dtype=np.int64)
    block_q = np.asarray(block_q, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    bh, bw = block_q.shape
    windows = np.lib.stride_tricks.sliding_window_view(src_q, (bh, bw))
    diff = windows - block_q
    diff = diff * diff
    return np.einsum("ijkl,kl->ij", diff, m.astype(np.int64))


def seam_cut_vertical(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost top-to-bottom path through an integer cost strip.

    Moves are diagonal or straight (column change of at most one per row).
    Ties resolve to the smallest column index. Returns one column per row.
    """
    cost = np.asarray(cost, dtype=np.int64)
    h, ov = cost.shape
    cum = np.empty_like(cost)
    step = np.zeros((h, ov), dtype=np.int64)
    cum[0] = cost[0]
    for i in range(1, h):
        prev = cum[i - 1]
        left = np.empty(ov, dtype=np.int64)
        right = np.empty(ov, dtype=np.int64)
        left[0] = np.iinfo(np.int64).max
        left[1:] = prev[:-1]
        right[-1] = np.iinfo(np.int64).max
        right[:-1] = prev[1:]
        stacked = np.stack([left, prev, right])  # offsets -1, 0, +1
        pick = np.argmin(stacked, axis=0)  # first occurrence wins
        step[i] = pick - 1
        cum[i] = cost[i] + stacked[pick, np.arange(ov)]
    path = np.empty(h, dtype=np.int64)
    path[-1] = int(np.argmin(cum[-1]))
    for i in range(h - 1, 0, -1):
        path[i - 1] = path[i] + step[i, path[i]]
    return path


def jacobi_sweep(img: np.ndarray, hole: np.ndarray) -> tuple[np.ndarray, float]:
    """One Jacobi relaxation sweep over the hole pixels.

    Each hole pixel becomes the mean of its in-bounds 4-neighbors from the
    current image. Returns the updated image and the largest change.
    """
    img = np.asarray(img, dtype=np.float64)
    hole_b = np.asarray(hole, dtype=bool)
    padded = np.zeros((img.shape[0] + 2, img.shape[1] + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = img
    up = padded[:-2, 1:-1]
    down = padded[2:, 1:-1]
    left = padded[1:-1, :-2]
    right = padded[1:-1, 2:]
    ones = np.zeros_like(padded)
    ones[1:-1, 1:-1] = 1.0
    count = ones[:-2, 1:-1] + ones[2:, 1:-1] + ones[1:-1, :-2] + ones[1:-1, 2:]
    mean = ((up + down) + left + right) / count
    out = img.copy()
    out[hole_b] = mean[hole_b]
    if not hole_b.any():
        return out, 0.0
    delta = float(np.max(np.abs(out[hole_b] - img[hole_b])))
    return out, delta
