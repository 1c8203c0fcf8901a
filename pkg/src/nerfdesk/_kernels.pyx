# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: exactly-rounded reductions, compositing scans,
and brute-force nearest neighbors.

Every routine mirrors the numpy fallback operation for operation so the two
backends produce bit-identical float64 results.  Exact summation is the
Shewchuk partials method with the correctly rounded finish used by
math.fsum; it relies on IEEE round-to-nearest, so this module must never be
compiled with -ffast-math.
"""

from libc.math cimport fabs, sqrt, INFINITY

import numpy as np

BACKEND_NAME = "compiled"

# Nonoverlapping float64 partials can never exceed ~40 terms; 128 leaves
# a wide margin and the guard below makes overflow loud instead of silent.


cdef inline int _fsum_add(double* p, int n, double x) except -1 nogil:
    cdef int i = 0, j
    cdef double y, hi, lo, yr, t
    for j in range(n):
        y = p[j]
        if fabs(x) < fabs(y):
            t = x
            x = y
            y = t
        hi = x + y
        yr = hi - x
        lo = y - yr
        if lo != 0.0:
            p[i] = lo
            i += 1
        x = hi
    if i >= 120:
        with gil:
            raise OverflowError("exact sum: partials buffer overflow")
    p[i] = x
    return i + 1


cdef inline double _fsum_finish(double* p, int n) nogil:
    # round the partials to the nearest double, half to even
    cdef double hi = 0.0, lo = 0.0, x, y, yr
    if n > 0:
        n -= 1
        hi = p[n]
        while n > 0:
            x = hi
            n -= 1
            y = p[n]
            hi = x + y
            yr = hi - x
            lo = y - yr
            if lo != 0.0:
                break
        if n > 0 and ((lo < 0.0 and p[n - 1] < 0.0) or
                      (lo > 0.0 and p[n - 1] > 0.0)):
            y = lo * 2.0
            x = hi + y
            yr = x - hi
            if y == yr:
                hi = x
    return hi


def exact_sum(double[::1] x):
    """Exactly rounded sum of a 1-D float64 array (math.fsum semantics)."""
    cdef double p[128]
    cdef int n = 0
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        n = _fsum_add(p, n, x[i])
    return _fsum_finish(p, n)


def exact_rowsum(double[:, ::1] e):
    """Exactly rounded sum of each row of a 2-D array."""
    cdef Py_ssize_t i, j, nrows = e.shape[0], ncols = e.shape[1]
    out_arr = np.empty(nrows)
    cdef double[::1] out = out_arr
    cdef double p[128]
    cdef int n
    for i in range(nrows):
        n = 0
        for j in range(ncols):
            n = _fsum_add(p, n, e[i, j])
        out[i] = _fsum_finish(p, n)
    return out_arr


def exact_weighted_rows(double[:, ::1] pm, double[:, ::1] v):
    """out[i, c] = exactly rounded sum over j of pm[i, j] * v[j, c]."""
    cdef Py_ssize_t i, j, c
    cdef Py_ssize_t nrows = pm.shape[0], inner = pm.shape[1], ncols = v.shape[1]
    out_arr = np.empty((nrows, ncols))
    cdef double[:, ::1] out = out_arr
    cdef double p[128]
    cdef int n
    for i in range(nrows):
        for c in range(ncols):
            n = 0
            for j in range(inner):
                n = _fsum_add(p, n, pm[i, j] * v[j, c])
            out[i, c] = _fsum_finish(p, n)
    return out_arr


def composite_scan(double[:, ::1] om, double[:, ::1] alpha,
                   double[:, :, ::1] rgb, double[::1] bg):
    """Serial emission-absorption scan along each ray; see the fallback."""
    cdef Py_ssize_t r, i, c, nr = om.shape[0], ns = om.shape[1]
    pixel_arr = np.zeros((nr, 3))
    opacity_arr = np.empty(nr)
    w_arr = np.empty((nr, ns))
    cdef double[:, ::1] pixel = pixel_arr
    cdef double[::1] opacity = opacity_arr
    cdef double[:, ::1] w = w_arr
    cdef double t, wi
    with nogil:
        for r in range(nr):
            t = 1.0
            for i in range(ns):
                wi = t * alpha[r, i]
                w[r, i] = wi
                for c in range(3):
                    pixel[r, c] = pixel[r, c] + wi * rgb[r, i, c]
                t = t * om[r, i]
            for c in range(3):
                pixel[r, c] = pixel[r, c] + t * bg[c]
            opacity[r] = 1.0 - t
    return pixel_arr, opacity_arr, w_arr


def composite_scan_backward(double[:, ::1] gpix, double[::1] gop,
                            double[:, ::1] delta, double[:, :, ::1] rgb,
                            double[::1] bg, double[:, ::1] om,
                            double[:, ::1] w):
    """Reverse-mode cotangents of composite_scan; see the fallback."""
    cdef Py_ssize_t r, i, nr = om.shape[0], ns = om.shape[1]
    gsigma_arr = np.empty((nr, ns))
    grgb_arr = np.empty((nr, ns, 3))
    t_arr = np.empty(ns + 1)
    cdef double[:, ::1] gsigma = gsigma_arr
    cdef double[:, :, ::1] grgb = grgb_arr
    cdef double[::1] t = t_arr
    cdef double acc0, acc1, acc2, tfin, inner, gb
    with nogil:
        for r in range(nr):
            t[0] = 1.0
            for i in range(ns):
                t[i + 1] = t[i] * om[r, i]
            tfin = t[ns]
            gb = gop[r] * tfin
            acc0 = tfin * bg[0]
            acc1 = tfin * bg[1]
            acc2 = tfin * bg[2]
            for i in range(ns - 1, -1, -1):
                inner = gpix[r, 0] * (t[i + 1] * rgb[r, i, 0] - acc0)
                inner = inner + gpix[r, 1] * (t[i + 1] * rgb[r, i, 1] - acc1)
                inner = inner + gpix[r, 2] * (t[i + 1] * rgb[r, i, 2] - acc2)
                gsigma[r, i] = delta[r, i] * inner + delta[r, i] * gb
                grgb[r, i, 0] = gpix[r, 0] * w[r, i]
                grgb[r, i, 1] = gpix[r, 1] * w[r, i]
                grgb[r, i, 2] = gpix[r, 2] * w[r, i]
                acc0 = acc0 + w[r, i] * rgb[r, i, 0]
                acc1 = acc1 + w[r, i] * rgb[r, i, 1]
                acc2 = acc2 + w[r, i] * rgb[r, i, 2]
    return gsigma_arr, grgb_arr


def chamfer_nn(double[:, ::1] p, double[:, ::1] q):
    """For each point of ``p``, the distance to its nearest point of ``q``."""
    cdef Py_ssize_t i, j, n = p.shape[0], m = q.shape[0]
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double best, d0, d1, d2, d
    with nogil:
        for i in range(n):
            best = INFINITY
            for j in range(m):
                d0 = p[i, 0] - q[j, 0]
                d1 = p[i, 1] - q[j, 1]
                d2 = p[i, 2] - q[j, 2]
                d = (d0 * d0 + d1 * d1) + d2 * d2
                if d < best:
                    best = d
            out[i] = sqrt(best)
    return out_arr
