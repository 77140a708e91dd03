"""Compiled sequential-order loops for the binary32/binary64 kernels.

Each output element is accumulated in ascending index order with one
rounding per multiply and per add (no FMA, no reassociation); vectorization
only runs across independent output elements.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def seq_dot(a, w):
    """out[s, j] = (...((a[s,0]*w[0,j]) + a[s,1]*w[1,j]) + ...)."""
    n, kk = a.shape
    m = w.shape[1]
    out = np.empty((n, m), a.dtype)
    for s in range(n):
        for j in range(m):
            out[s, j] = a[s, 0] * w[0, j]
        for k in range(1, kk):
            ask = a[s, k]
            for j in range(m):
                out[s, j] = out[s, j] + ask * w[k, j]
    return out


@njit(cache=True)
def seq_outer(a, d):
    """out[j, k] = sum over samples s (ascending) of a[s, j] * d[s, k]."""
    n, p = a.shape
    m = d.shape[1]
    out = np.empty((p, m), a.dtype)
    for j in range(p):
        for k in range(m):
            out[j, k] = a[0, j] * d[0, k]
    for s in range(1, n):
        for j in range(p):
            asj = a[s, j]
            for k in range(m):
                out[j, k] = out[j, k] + asj * d[s, k]
    return out


@njit(cache=True)
def seq_colsum(x):
    """Sum over axis 0 of a 2-D array, rows added in ascending order."""
    n, m = x.shape
    out = x[0].copy()
    for s in range(1, n):
        for j in range(m):
            out[j] = out[j] + x[s, j]
    return out


@njit(cache=True)
def _two_prod(a, b):
    # Dekker/Veltkamp product: a*b == p + e exactly (no overflow/underflow)
    c = 134217729.0
    t = c * a
    ah = t - (t - a)
    al = a - ah
    t = c * b
    bh = t - (t - b)
    bl = b - bh
    p = a * b
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


@njit(cache=True)
def sigmoid_f64(x):
    """1 / (1 + exp(-x)) with the sum and reciprocal carried in double-double.

    Only the libm ``exp`` is rounded before the final rounding, so the
    result is within one ulp of the true sigmoid.
    """
    flat_in = np.ascontiguousarray(x).reshape(-1)
    flat = np.empty(flat_in.size, np.float64)
    for i in range(flat_in.size):
        v = flat_in[i]
        if v != v:
            flat[i] = v
            continue
        e = np.exp(-v)
        if e == np.inf:
            flat[i] = 0.0
            continue
        s = 1.0 + e
        bb = s - 1.0
        serr = (1.0 - (s - bb)) + (e - bb)
        q = 1.0 / s
        if e > 1e290 or q < 1e-290:
            flat[i] = q
            continue
        p, pe = _two_prod(q, s)
        r = ((1.0 - p) - pe) - q * serr
        flat[i] = q + r / s
    return flat.reshape(x.shape)
