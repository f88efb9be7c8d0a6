# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.  Same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, exp

cnp.import_array()


cdef inline double _sigmoid(double x) nogil:
    cdef double ex
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    ex = exp(x)
    return ex / (1.0 + ex)


def gate_forward(const double[:, ::1] zv, const double[:, ::1] zu, const double[::1] w, double bw):
    cdef Py_ssize_t n = zv.shape[0], a = zv.shape[1], i, j
    t_arr = np.empty((n, a))
    s_arr = np.empty((n, a))
    e_arr = np.empty(n)
    cdef double[:, ::1] t = t_arr
    cdef double[:, ::1] s = s_arr
    cdef double[::1] e = e_arr
    cdef double acc, tv, sv
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(a):
                tv = tanh(zv[i, j])
                sv = _sigmoid(zu[i, j])
                t[i, j] = tv
                s[i, j] = sv
                acc = acc + tv * sv * w[j]
            e[i] = acc + bw
    return t_arr, s_arr, e_arr


def gate_backward(const double[::1] de, const double[:, ::1] t, const double[:, ::1] s, const double[::1] w):
    cdef Py_ssize_t n = t.shape[0], a = t.shape[1], i, j
    dzv_arr = np.empty((n, a))
    dzu_arr = np.empty((n, a))
    dw_arr = np.zeros(a)
    cdef double[:, ::1] dzv = dzv_arr
    cdef double[:, ::1] dzu = dzu_arr
    cdef double[::1] dw = dw_arr
    cdef double g, tv, sv
    with nogil:
        for i in range(n):
            for j in range(a):
                tv = t[i, j]
                sv = s[i, j]
                g = de[i] * w[j]
                dzv[i, j] = g * sv * (1.0 - tv * tv)
                dzu[i, j] = g * tv * sv * (1.0 - sv)
                dw[j] += tv * sv * de[i]
    return dzv_arr, dzu_arr, dw_arr


def saturation_histogram(const unsigned char[:, :, :] rgb):
    cdef Py_ssize_t h = rgb.shape[0], wd = rgb.shape[1], y, x
    sat_arr = np.empty((h, wd), dtype=np.uint8)
    hist_arr = np.zeros(256, dtype=np.int64)
    cdef unsigned char[:, ::1] sat = sat_arr
    cdef long long[::1] hist = hist_arr
    cdef int r, g, b, mx, mn, v
    with nogil:
        for y in range(h):
            for x in range(wd):
                r = rgb[y, x, 0]
                g = rgb[y, x, 1]
                b = rgb[y, x, 2]
                mx = r
                if g > mx:
                    mx = g
                if b > mx:
                    mx = b
                mn = r
                if g < mn:
                    mn = g
                if b < mn:
                    mn = b
                if mx == 0:
                    v = 0
                else:
                    v = (255 * (mx - mn) + mx // 2) // mx
                sat[y, x] = <unsigned char>v
                hist[v] += 1
    return sat_arr, hist_arr


def tile_counts(const unsigned char[:, ::1] m, Py_ssize_t tile_px, Py_ssize_t cols, Py_ssize_t rows):
    out_arr = np.zeros((rows, cols), dtype=np.int64)
    cdef long long[:, ::1] out = out_arr
    cdef Py_ssize_t y, x, tx, x0
    cdef long long acc
    cdef const unsigned char* row
    with nogil:
        for y in range(rows * tile_px):
            row = &m[y, 0]
            for tx in range(cols):
                x0 = tx * tile_px
                acc = 0
                for x in range(x0, x0 + tile_px):
                    acc += row[x] != 0
                out[y // tile_px, tx] += acc
    return out_arr
