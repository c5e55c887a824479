# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im with the same layout as ``_pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int k):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t p = k // 2, kk = k * k
    cdef Py_ssize_t b, c, y, xx, dy, dx, sy, sx, row, col
    out_arr = np.zeros((B * H * W, C * kk), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for b in range(B):
            for y in range(H):
                for xx in range(W):
                    row = (b * H + y) * W + xx
                    for c in range(C):
                        col = c * kk
                        for dy in range(k):
                            sy = y + dy - p
                            if sy < 0 or sy >= H:
                                col = col + k
                                continue
                            for dx in range(k):
                                sx = xx + dx - p
                                if sx >= 0 and sx < W:
                                    out[row, col] = x[b, c, sy, sx]
                                col = col + 1
    return out_arr


def col2im(const double[:, ::1] cols, shape, int k):
    cdef Py_ssize_t B = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t p = k // 2, kk = k * k
    cdef Py_ssize_t b, c, y, xx, dy, dx, sy, sx, row
    out_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    with nogil:
        # (dy, dx) outermost so the summation order matches the numpy kernel
        for dy in range(k):
            for dx in range(k):
                for b in range(B):
                    for c in range(C):
                        for y in range(H):
                            sy = y + dy - p
                            if sy < 0 or sy >= H:
                                continue
                            for xx in range(W):
                                sx = xx + dx - p
                                if sx >= 0 and sx < W:
                                    row = (b * H + y) * W + xx
                                    out[b, c, sy, sx] += cols[row, c * kk + dy * k + dx]
    return out_arr
