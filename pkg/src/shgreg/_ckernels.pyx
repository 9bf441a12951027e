# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same contracts and summation order as _kernels_py."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline double _tap(const double[:, :, ::1] img, Py_ssize_t y, Py_ssize_t x,
                        Py_ssize_t c) noexcept nogil:
    if x < 0 or y < 0 or y >= img.shape[0] or x >= img.shape[1]:
        return 0.0
    return img[y, x, c]


def warp_bilinear(img, sx, sy, bint with_grad=False):
    cdef const double[:, :, ::1] im = np.ascontiguousarray(img, dtype=np.float64)
    cdef const double[:, ::1] xs = np.ascontiguousarray(sx, dtype=np.float64)
    cdef const double[:, ::1] ys = np.ascontiguousarray(sy, dtype=np.float64)
    cdef Py_ssize_t h = xs.shape[0], w = xs.shape[1], nc = im.shape[2]
    out_a = np.empty((h, w, nc))
    cdef double[:, :, ::1] out = out_a
    cdef double[:, :, ::1] gxo
    cdef double[:, :, ::1] gyo
    if with_grad:
        gx_a = np.empty((h, w, nc))
        gy_a = np.empty((h, w, nc))
        gxo = gx_a
        gyo = gy_a
    cdef Py_ssize_t i, j, c, x0, y0
    cdef double x, y, fx, fy, ax, ay, v00, v10, v01, v11
    with nogil:
        for i in range(h):
            for j in range(w):
                x = xs[i, j]
                y = ys[i, j]
                ax = floor(x)
                ay = floor(y)
                fx = x - ax
                fy = y - ay
                x0 = <Py_ssize_t>ax
                y0 = <Py_ssize_t>ay
                for c in range(nc):
                    v00 = _tap(im, y0, x0, c)
                    v10 = _tap(im, y0, x0 + 1, c)
                    v01 = _tap(im, y0 + 1, x0, c)
                    v11 = _tap(im, y0 + 1, x0 + 1, c)
                    out[i, j, c] = (v00 * (1.0 - fx) * (1.0 - fy)
                                    + v10 * fx * (1.0 - fy)
                                    + v01 * (1.0 - fx) * fy
                                    + v11 * fx * fy)
                    if with_grad:
                        gxo[i, j, c] = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy
                        gyo[i, j, c] = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx
    if with_grad:
        return out_a, gx_a, gy_a
    return out_a


def cost_volume(fixed, moving, int radius, int patch_radius):
    cdef const double[:, :, ::1] f = np.ascontiguousarray(fixed, dtype=np.float64)
    cdef const double[:, :, ::1] m = np.ascontiguousarray(moving, dtype=np.float64)
    cdef Py_ssize_t h = f.shape[0], w = f.shape[1], nc = f.shape[2]
    cdef int r = radius, pr = patch_radius
    cdef int side = 2 * r + 1
    cdef double denom = <double>((2 * pr + 1) * (2 * pr + 1) * nc)
    out_a = np.empty((h, w, side, side))
    cdef double[:, :, :, ::1] out = out_a
    cdef Py_ssize_t y, x, iy, ix, v, u, c, fy, fx, my, mx
    cdef double acc, a, b, d
    cdef bint fin, min_
    with nogil:
        for y in range(h):
            for x in range(w):
                for iy in range(side):
                    for ix in range(side):
                        acc = 0.0
                        for v in range(-pr, pr + 1):
                            fy = y + v
                            my = fy + iy - r
                            for u in range(-pr, pr + 1):
                                fx = x + u
                                mx = fx + ix - r
                                fin = 0 <= fy < h and 0 <= fx < w
                                min_ = 0 <= my < h and 0 <= mx < w
                                for c in range(nc):
                                    a = f[fy, fx, c] if fin else 0.0
                                    b = m[my, mx, c] if min_ else 0.0
                                    d = a - b
                                    acc = acc + d * d
                        out[y, x, iy, ix] = acc / denom
    return out_a
