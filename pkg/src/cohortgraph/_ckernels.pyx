# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; signatures mirror ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, pow, sqrt, INFINITY

ctypedef fused real:
    float
    double


def im2col3x3(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((c * 9, n * h * w), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t ci, ky, kx, b, i, j, row, col, si, j0, j1
    for ci in range(c):
        for ky in range(3):
            for kx in range(3):
                row = ci * 9 + ky * 3 + kx
                # columns whose source pixel lies inside the image
                j0 = 1 if kx == 0 else 0
                j1 = w - 1 if kx == 2 else w
                for b in range(n):
                    for i in range(h):
                        si = i + ky - 1
                        col = (b * h + i) * w
                        if si < 0 or si >= h:
                            for j in range(w):
                                cols[row, col + j] = 0
                            continue
                        if j0 == 1:
                            cols[row, col] = 0
                        if j1 == w - 1:
                            cols[row, col + w - 1] = 0
                        for j in range(j0, j1):
                            cols[row, col + j] = x[b, ci, si, j + kx - 1]
    return out


def col2im3x3(real[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w):
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t ci, ky, kx, b, i, j, row, col, si, j0, j1
    for b in range(n):
        for ci in range(c):
            for ky in range(3):
                for kx in range(3):
                    row = ci * 9 + ky * 3 + kx
                    j0 = 1 if kx == 0 else 0
                    j1 = w - 1 if kx == 2 else w
                    for i in range(h):
                        si = i + ky - 1
                        if si < 0 or si >= h:
                            continue
                        col = (b * h + i) * w
                        for j in range(j0, j1):
                            x[b, ci, si, j + kx - 1] += cols[row, col + j]
    return out


def maxpool2x2(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t hh = h // 2, ww = w // 2
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, hh, ww), dtype=dtype)
    arg = np.empty((n, c, hh, ww), dtype=np.int8)
    cdef real[:, :, :, ::1] o = out
    cdef cnp.int8_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, ci, i, j, q
    cdef real best, v
    cdef cnp.int8_t bq
    for b in range(n):
        for ci in range(c):
            for i in range(hh):
                for j in range(ww):
                    best = x[b, ci, 2 * i, 2 * j]
                    bq = 0
                    for q in range(1, 4):
                        v = x[b, ci, 2 * i + q // 2, 2 * j + q % 2]
                        if v > best:
                            best = v
                            bq = <cnp.int8_t>q
                    o[b, ci, i, j] = best
                    a[b, ci, i, j] = bq
    return out, arg


def maxpool2x2_backward(real[:, :, :, ::1] g, cnp.int8_t[:, :, :, ::1] arg, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], hh = g.shape[2], ww = g.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t b, ci, i, j, q
    for b in range(n):
        for ci in range(c):
            for i in range(hh):
                for j in range(ww):
                    q = arg[b, ci, i, j]
                    o[b, ci, 2 * i + q // 2, 2 * j + q % 2] = g[b, ci, i, j]
    return out


def pairwise_minkowski(double[:, ::1] a, double[:, ::1] b, double[::1] weights, double p):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, l
    cdef double acc, t
    for i in range(n):
        for j in range(m):
            acc = 0.0
            if p == 2.0:
                for l in range(d):
                    t = weights[l] * (a[i, l] - b[j, l])
                    acc += t * t
                o[i, j] = sqrt(acc)
            elif p == 1.0:
                for l in range(d):
                    acc += fabs(weights[l] * (a[i, l] - b[j, l]))
                o[i, j] = acc
            else:
                for l in range(d):
                    acc += pow(fabs(weights[l] * (a[i, l] - b[j, l])), p)
                o[i, j] = pow(acc, 1.0 / p)
    return out


def same_label_kth_distance(double[::1] x, cnp.int64_t[::1] labels, cnp.int64_t[::1] k):
    cdef Py_ssize_t n = x.shape[0], i, j, r, kk
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    buf = np.empty(n, dtype=np.float64)
    cdef double[::1] best = buf
    cdef double d, tmp
    for i in range(n):
        kk = k[i]
        for r in range(kk):
            best[r] = INFINITY
        for j in range(n):
            if j == i or labels[j] != labels[i]:
                continue
            d = fabs(x[j] - x[i])
            if d < best[kk - 1]:
                # insertion into the sorted k-best buffer
                r = kk - 1
                while r > 0 and best[r - 1] > d:
                    best[r] = best[r - 1]
                    r -= 1
                best[r] = d
        o[i] = best[kk - 1]
    return out


def count_within(double[::1] x, double[::1] radius):
    cdef Py_ssize_t n = x.shape[0], i, j
    out = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    cdef cnp.int64_t cnt
    for i in range(n):
        cnt = 0
        for j in range(n):
            if fabs(x[j] - x[i]) <= radius[i]:
                cnt += 1
        o[i] = cnt
    return out
