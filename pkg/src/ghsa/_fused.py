"""Fused elementwise kernels for the MLP and optimiser hot loops."""

import numpy as np
from numba import njit


@njit(cache=True)
def bias_relu_(h, b):
    """``h = max(h + b, 0)`` in place."""
    n, m = h.shape
    for i in range(n):
        for j in range(m):
            v = h[i, j] + b[j]
            h[i, j] = v if v > 0 else 0


@njit(cache=True)
def bias_add_(h, b):
    n, m = h.shape
    for i in range(n):
        for j in range(m):
            h[i, j] += b[j]


@njit(cache=True)
def colsum(g):
    n, m = g.shape
    out = np.zeros(m, np.float64)
    for i in range(n):
        for j in range(m):
            out[j] += g[i, j]
    return out.astype(g.dtype)


@njit(cache=True)
def relu_mask_colsum_(g, a):
    """Zero ``g`` where ``a <= 0`` in place; return column sums of the result."""
    n, m = g.shape
    out = np.zeros(m, np.float64)
    for i in range(n):
        for j in range(m):
            x = g[i, j] if a[i, j] > 0 else g.dtype.type(0)
            g[i, j] = x
            out[j] += x
    return out.astype(g.dtype)


@njit(cache=True)
def adam_(p, g, m, v, b1, b2, step, eps):
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    for i in range(pf.size):
        gi = gf[i]
        mi = b1 * mf[i] + (1 - b1) * gi
        vi = b2 * vf[i] + (1 - b2) * gi * gi
        mf[i] = mi
        vf[i] = vi
        pf[i] -= step * mi / (np.sqrt(vi) + eps)
