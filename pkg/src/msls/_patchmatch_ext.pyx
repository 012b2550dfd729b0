# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled local patch search and Hamming-weighted fusion."""
import numpy as np

from libc.math cimport INFINITY


def search_fuse(const double[:, ::1] xl, const double[:, ::1] xpr,
                const Py_ssize_t[::1] ay, const Py_ssize_t[::1] ax,
                const Py_ssize_t[::1] ylo, const Py_ssize_t[::1] yhi,
                const Py_ssize_t[::1] xlo, const Py_ssize_t[::1] xhi,
                const double[:, ::1] w):
    cdef Py_ssize_t n = ay.shape[0]
    cdef Py_ssize_t p = w.shape[0]
    cdef Py_ssize_t i, y, x, u, v, by, bx, ty, tx
    cdef double s, d, best
    cdef long long count = 0

    my_a = np.empty(n, dtype=np.intp)
    mx_a = np.empty(n, dtype=np.intp)
    dist_a = np.empty(n, dtype=np.float64)
    num_a = np.zeros((xl.shape[0], xl.shape[1]), dtype=np.float64)
    den_a = np.zeros((xl.shape[0], xl.shape[1]), dtype=np.float64)
    cdef Py_ssize_t[::1] my = my_a
    cdef Py_ssize_t[::1] mx = mx_a
    cdef double[::1] dist = dist_a
    cdef double[:, ::1] num = num_a
    cdef double[:, ::1] den = den_a

    with nogil:
        for i in range(n):
            best = INFINITY
            by = ylo[i]
            bx = xlo[i]
            for y in range(ylo[i], yhi[i] + 1):
                for x in range(xlo[i], xhi[i] + 1):
                    count += 1
                    s = 0.0
                    for u in range(p):
                        for v in range(p):
                            d = xl[ay[i] + u, ax[i] + v] - xpr[y + u, x + v]
                            s = s + d * d
                        if s >= best:
                            break
                    if s < best:
                        best = s
                        by = y
                        bx = x
            my[i] = by
            mx[i] = bx
            dist[i] = best

        # offsets outer, anchors inner: each output pixel then sums its
        # contributions in the same order as the numpy fallback
        for u in range(p):
            for v in range(p):
                for i in range(n):
                    ty = ay[i] + u
                    tx = ax[i] + v
                    num[ty, tx] = num[ty, tx] + w[u, v] * xpr[my[i] + u, mx[i] + v]
                    den[ty, tx] = den[ty, tx] + w[u, v]

    return num_a, den_a, my_a, mx_a, dist_a, count
