# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Must stay numerically identical to ``kernels._py_*``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()


def zbuffer(const cnp.int64_t[::1] pixel, const double[::1] depth,
            const cnp.int64_t[::1] point, Py_ssize_t n_pixels):
    cdef Py_ssize_t m = pixel.shape[0]
    cdef Py_ssize_t i
    cdef cnp.int64_t p, q
    cdef double d
    zbuf_arr = np.full(n_pixels, np.inf, dtype=np.float64)
    win_arr = np.full(n_pixels, -1, dtype=np.int64)
    cdef double[::1] zbuf = zbuf_arr
    cdef cnp.int64_t[::1] win = win_arr
    with nogil:
        for i in range(m):
            p = pixel[i]
            if p < 0:
                continue
            d = depth[i]
            q = point[i]
            if d < zbuf[p] or (d == zbuf[p] and win[p] >= 0 and q < win[p]):
                zbuf[p] = d
                win[p] = q
    return win_arr, zbuf_arr


def bilinear(const double[:, :, ::1] img, const double[::1] x, const double[::1] y,
             bint wrap_x):
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    cdef Py_ssize_t c = img.shape[2]
    cdef Py_ssize_t n = x.shape[0]
    out_arr = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, x0, x1, y0, y1
    cdef double xi, yi, fx, fy, gx, gy, top, bot
    with nogil:
        for i in range(n):
            xi = x[i]
            yi = y[i]
            if yi < 0.0:
                yi = 0.0
            elif yi > h - 1:
                yi = h - 1
            if wrap_x:
                fx = floor(xi)
                x0 = <Py_ssize_t>fx
                fx = xi - fx
                x0 = ((x0 % w) + w) % w
                x1 = (x0 + 1) % w
            else:
                if xi < 0.0:
                    xi = 0.0
                elif xi > w - 1:
                    xi = w - 1
                fx = floor(xi)
                x0 = <Py_ssize_t>fx
                fx = xi - fx
                x1 = x0 + 1
                if x1 > w - 1:
                    x1 = w - 1
            gy = floor(yi)
            y0 = <Py_ssize_t>gy
            fy = yi - gy
            y1 = y0 + 1
            if y1 > h - 1:
                y1 = h - 1
            gx = 1.0 - fx
            gy = 1.0 - fy
            for k in range(c):
                top = img[y0, x0, k] * gx + img[y0, x1, k] * fx
                bot = img[y1, x0, k] * gx + img[y1, x1, k] * fx
                out[i, k] = top * gy + bot * fy
    return out_arr
