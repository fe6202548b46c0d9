"""numba versions of the hot kernels; semantics match ``_kernels_numpy``."""

import math

import numpy as np
from numba import njit

# fastmath stays off: the loss identities are checked to 1e-12.
_opts = dict(cache=True, nogil=True, fastmath=False)


@njit(**_opts)
def row_logsumexp(z):
    n, m = z.shape
    out = np.empty(n)
    for i in range(n):
        mx = z[i, 0]
        for j in range(1, m):
            if z[i, j] > mx:
                mx = z[i, j]
        s = 0.0
        for j in range(m):
            s += math.exp(z[i, j] - mx)
        out[i] = mx + math.log(s)
    return out


@njit(**_opts)
def row_softmax(z):
    n, m = z.shape
    out = np.empty((n, m))
    for i in range(n):
        mx = z[i, 0]
        for j in range(1, m):
            if z[i, j] > mx:
                mx = z[i, j]
        s = 0.0
        for j in range(m):
            e = math.exp(z[i, j] - mx)
            out[i, j] = e
            s += e
        for j in range(m):
            out[i, j] /= s
    return out


@njit(**_opts)
def topk_hits(z, labels, k):
    n, m = z.shape
    out = np.empty(n, dtype=np.bool_)
    for i in range(n):
        t = z[i, labels[i]]
        beaten = 0
        for j in range(m):
            if z[i, j] > t:
                beaten += 1
        out[i] = beaten < k
    return out


@njit(**_opts)
def assign_exits(confidence, thresholds):
    n, c = confidence.shape
    exits = np.empty(n, dtype=np.int64)
    for i in range(n):
        e = c - 1
        for k in range(c - 1):
            if confidence[i, k] >= thresholds[k]:
                e = k
                break
        exits[i] = e
    return exits
