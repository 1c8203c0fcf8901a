"""Pure numpy/math implementations of the hot kernels.

This is the fallback used when the compiled extension is unavailable; both
implementations follow the same operation orders and exactly-rounded
reductions, so they produce bit-identical results.  Exact sums are
order-independent, which is what makes attention bit-exact under token
permutation.
"""

import math

import numpy as np

BACKEND_NAME = "numpy"


def exact_sum(x):
    """Exactly rounded sum of a 1-D float64 array (math.fsum semantics)."""
    return math.fsum(x)


def exact_rowsum(e):
    """Exactly rounded sum of each row of a 2-D array."""
    return np.array([math.fsum(row) for row in e])


def exact_weighted_rows(p, v):
    """out[i, c] = exactly rounded sum over j of p[i, j] * v[j, c]."""
    n, _ = p.shape
    c = v.shape[1]
    out = np.empty((n, c))
    for i in range(n):
        pi = p[i]
        for j in range(c):
            out[i, j] = math.fsum(pi * v[:, j])
    return out


def composite_scan(om, alpha, rgb, bg):
    """Serial emission-absorption scan along each ray.

    ``om[r, i] = exp(-sigma delta)`` per segment, ``alpha = 1 - om`` (the
    caller may use expm1 for accuracy), colors ``rgb`` (R, S, 3) and
    background ``bg`` (3,).  Returns (pixel, opacity, weights); the sample
    loop runs in index order so the compiled kernel matches bit for bit.
    """
    r, s = om.shape
    t = np.empty((r, s + 1))
    t[:, 0] = 1.0
    np.cumprod(om, axis=1, out=t[:, 1:])
    w = t[:, :s] * alpha
    pixel = np.zeros((r, 3))
    for i in range(s):
        pixel += w[:, i, None] * rgb[:, i, :]
    tfin = t[:, s]
    pixel += tfin[:, None] * bg[None, :]
    opacity = 1.0 - tfin
    return pixel, opacity, w


def composite_scan_backward(gpix, gop, delta, rgb, bg, om, w):
    """Cotangents of the compositing scan w.r.t. density and color.

    For suffix sums A[r, i, c] = sum_{m>i} w_m rgb_mc + T_final bg_c:

        grgb[r, i, c]  = gpix[r, c] * w[r, i]
        gsigma[r, i]   = delta*(sum_c gpix_c*(T_{i+1} rgb_ic - A_ic))
                         + delta*(gop * T_final)

    which is the exact reverse-mode derivative, division-free so fully
    saturated segments (alpha = 1) stay finite.
    """
    r, s = om.shape
    t = np.empty((r, s + 1))
    t[:, 0] = 1.0
    np.cumprod(om, axis=1, out=t[:, 1:])
    tfin = t[:, s]
    grgb = gpix[:, None, :] * w[:, :, None]
    a = np.empty((r, s, 3))
    acc = tfin[:, None] * bg[None, :]
    for i in range(s - 1, -1, -1):
        a[:, i, :] = acc
        acc = acc + w[:, i, None] * rgb[:, i, :]
    inner = (gpix[:, None, :] * (t[:, 1:, None] * rgb - a)).sum(axis=2)
    gsigma = delta * inner + delta * (gop * tfin)[:, None]
    return gsigma, grgb


def chamfer_nn(p, q):
    """For each point of ``p``, the distance to its nearest point of ``q``."""
    out = np.empty(len(p))
    chunk = max(1, 2_000_000 // max(len(q), 1))
    for s in range(0, len(p), chunk):
        d2 = ((p[s:s + chunk, None, :] - q[None, :, :]) ** 2).sum(axis=2)
        out[s:s + chunk] = np.sqrt(d2.min(axis=1))
    return out
