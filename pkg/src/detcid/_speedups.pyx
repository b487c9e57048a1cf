# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the synthesis hot loops.

Numerically interchangeable with ``detcid._kernels_np``: float expressions
use the same evaluation order (built with -ffp-contract=off) and the
quilting kernels are pure integer arithmetic.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

BACKEND = "compiled"


def warp_bilinear(src, inv, int out_h, int out_w):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] m = np.ascontiguousarray(inv, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((out_h, out_w), dtype=np.float64)
    cdef Py_ssize_t h = s.shape[0], w = s.shape[1]
    cdef Py_ssize_t y, x
    cdef double a00 = m[0, 0], a01 = m[0, 1], a02 = m[0, 2]
    cdef double a10 = m[1, 0], a11 = m[1, 1], a12 = m[1, 2]
    cdef double sx, sy, fx, fy, v00, v01, v10, v11, top, bot
    cdef Py_ssize_t x0, y0, x1, y1
    for y in range(out_h):
        for x in range(out_w):
            sx = a00 * x + a01 * y + a02
            sy = a10 * x + a11 * y + a12
            x0 = <Py_ssize_t>floor(sx)
            y0 = <Py_ssize_t>floor(sy)
            fx = sx - floor(sx)
            fy = sy - floor(sy)
            x1 = x0 + 1
            y1 = y0 + 1
            v00 = s[y0, x0] if (0 <= y0 < h and 0 <= x0 < w) else 0.0
            v01 = s[y0, x1] if (0 <= y0 < h and 0 <= x1 < w) else 0.0
            v10 = s[y1, x0] if (0 <= y1 < h and 0 <= x0 < w) else 0.0
            v11 = s[y1, x1] if (0 <= y1 < h and 0 <= x1 < w) else 0.0
            top = (1.0 - fx) * v00 + fx * v01
            bot = (1.0 - fx) * v10 + fx * v11
            out[y, x] = (1.0 - fy) * top + fy * bot
    return out


def warp_nearest(src, inv, int out_h, int out_w):
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] s = np.ascontiguousarray(src, dtype=np.uint8)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] m = np.ascontiguousarray(inv, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] out = np.zeros((out_h, out_w), dtype=np.uint8)
    cdef Py_ssize_t h = s.shape[0], w = s.shape[1]
    cdef Py_ssize_t y, x, xi, yi
    cdef double a00 = m[0, 0], a01 = m[0, 1], a02 = m[0, 2]
    cdef double a10 = m[1, 0], a11 = m[1, 1], a12 = m[1, 2]
    cdef double sx, sy
    for y in range(out_h):
        for x in range(out_w):
            sx = a00 * x + a01 * y + a02
            sy = a10 * x + a11 * y + a12
            xi = <Py_ssize_t>floor(sx + 0.5)
            yi = <Py_ssize_t>floor(sy + 0.5)
            if 0 <= yi < h and 0 <= xi < w:
                out[y, x] = s[yi, xi]
    return out


def masked_ssd_scan(src_q, block_q, mask):
    cdef cnp.ndarray[cnp.int64_t, ndim=2] s = np.ascontiguousarray(src_q, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] b = np.ascontiguousarray(block_q, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] mk = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t sh = s.shape[0], sw = s.shape[1]
    cdef Py_ssize_t bh = b.shape[0], bw = b.shape[1]
    cdef Py_ssize_t ny = sh - bh + 1, nx = sw - bw + 1
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out = np.zeros((ny, nx), dtype=np.int64)
    cdef Py_ssize_t i, j, r, c
    cdef long long acc, d
    for i in range(ny):
        for j in range(nx):
            acc = 0
            for r in range(bh):
                for c in range(bw):
                    if mk[r, c]:
                        d = s[i + r, j + c] - b[r, c]
                        acc += d * d
            out[i, j] = acc
    return out


def seam_cut_vertical(cost):
    cdef cnp.ndarray[cnp.int64_t, ndim=2] cst = np.ascontiguousarray(cost, dtype=np.int64)
    cdef Py_ssize_t h = cst.shape[0], ov = cst.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] cum = np.empty((h, ov), dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] step = np.zeros((h, ov), dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] path = np.empty(h, dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef long long best, cand
    cdef long long off
    for j in range(ov):
        cum[0, j] = cst[0, j]
    for i in range(1, h):
        for j in range(ov):
            # prefer offset -1, then 0, then +1 on ties (smallest column)
            if j > 0:
                best = cum[i - 1, j - 1]
                off = -1
            else:
                best = cum[i - 1, j]
                off = 0
            if j > 0:
                cand = cum[i - 1, j]
                if cand < best:
                    best = cand
                    off = 0
            if j + 1 < ov:
                cand = cum[i - 1, j + 1]
                if cand < best:
                    best = cand
                    off = 1
            step[i, j] = off
            cum[i, j] = cst[i, j] + best
    best = cum[h - 1, 0]
    off = 0
    for j in range(1, ov):
        if cum[h - 1, j] < best:
            best = cum[h - 1, j]
            off = j
    path[h - 1] = off
    for i in range(h - 1, 0, -1):
        path[i - 1] = path[i] + step[i, path[i]]
    return path


def jacobi_sweep(img, hole):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] im = np.ascontiguousarray(img, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] hl = np.ascontiguousarray(hole, dtype=np.uint8)
    cdef Py_ssize_t h = im.shape[0], w = im.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = im.copy()
    cdef Py_ssize_t y, x
    cdef double up, down, left, right, cnt, val, d, max_delta
    max_delta = 0.0
    for y in range(h):
        for x in range(w):
            if hl[y, x]:
                up = im[y - 1, x] if y > 0 else 0.0
                down = im[y + 1, x] if y + 1 < h else 0.0
                left = im[y, x - 1] if x > 0 else 0.0
                right = im[y, x + 1] if x + 1 < w else 0.0
                cnt = 0.0
                if y > 0:
                    cnt += 1.0
                if y + 1 < h:
                    cnt += 1.0
                if x > 0:
                    cnt += 1.0
                if x + 1 < w:
                    cnt += 1.0
                val = ((up + down) + left + right) / cnt
                out[y, x] = val
                d = val - im[y, x]
                if d < 0:
                    d = -d
                if d > max_delta:
                    max_delta = d
    return out, max_delta
