"""Compiled inner loops for quadratic GMM objectives over a theta grid.

Grid and single-point evaluations accumulate ``e_a W_ab e_b`` in the same
order, so an objective tabulated on the grid and evaluated at one of the grid
points agree bit for bit.
"""

import numpy as np
from numba import njit


@njit(inline="always", cache=True)
def _qform(xi, n, k, t, W, j):
    q = 0.0
    for a in range(k):
        ea = xi[n, a] - t * xi[n, k + a]
        for b in range(k):
            eb = xi[n, b] - t * xi[n, k + b]
            q += ea * W[j, a, b] * eb
    return q


BLOCK = 2048


@njit(cache=True, nogil=True)
def _fill_row(xi, n, k, theta, W, j0, j1, buf):
    # same accumulation order as _qform, with the grid index innermost
    if k == 1:
        x0 = xi[n, 0]
        x1 = xi[n, 1]
        for j in range(j0, j1):
            e = x0 - theta[j] * x1
            buf[j - j0] = e * W[j, 0, 0] * e
        return
    for j in range(j1 - j0):
        buf[j] = 0.0
    for a in range(k):
        x0a = xi[n, a]
        x1a = xi[n, k + a]
        for b in range(k):
            x0b = xi[n, b]
            x1b = xi[n, k + b]
            for j in range(j0, j1):
                t = theta[j]
                buf[j - j0] += (x0a - t * x1a) * W[j, a, b] * (x0b - t * x1b)


@njit(cache=True, nogil=True)
def grid_argmin(xi, k, theta, W, valid):
    """Index of the first grid minimum and the minimal value, per row of ``xi``."""
    n_rows = xi.shape[0]
    G = theta.shape[0]
    idx = np.zeros(n_rows, dtype=np.int64)
    best = np.full(n_rows, np.inf)
    buf = np.empty(min(G, BLOCK))
    for n in range(n_rows):
        bq = np.inf
        bj = 0
        for j0 in range(0, G, BLOCK):
            j1 = min(j0 + BLOCK, G)
            _fill_row(xi, n, k, theta, W, j0, j1, buf)
            for j in range(j0, j1):
                if buf[j - j0] < bq and valid[j]:
                    bq = buf[j - j0]
                    bj = j
        idx[n] = bj
        best[n] = bq
    return idx, best


@njit(cache=True, nogil=True)
def grid_values(xi, k, theta, W, valid):
    n_rows = xi.shape[0]
    G = theta.shape[0]
    out = np.empty((n_rows, G))
    buf = np.empty(min(G, BLOCK))
    for n in range(n_rows):
        for j0 in range(0, G, BLOCK):
            j1 = min(j0 + BLOCK, G)
            _fill_row(xi, n, k, theta, W, j0, j1, buf)
            for j in range(j0, j1):
                out[n, j] = buf[j - j0] if valid[j] else np.inf
    return out


@njit(cache=True, nogil=True)
def point_values(xi, k, theta, W, valid):
    """Objective of row ``n`` at its own ``theta[n]`` with weight ``W[n]``."""
    n_rows = xi.shape[0]
    out = np.empty(n_rows)
    for n in range(n_rows):
        if valid[n]:
            out[n] = _qform(xi, n, k, theta[n], W, n)
        else:
            out[n] = np.inf
    return out


@njit(cache=True, nogil=True)
def point_slopes(xi, k, theta, W, dW, valid):
    """``dQ/dtheta = -2 xi1' W e + e' dW e`` at each row's own theta."""
    n_rows = xi.shape[0]
    out = np.empty(n_rows)
    for n in range(n_rows):
        if not valid[n]:
            out[n] = np.nan
            continue
        t = theta[n]
        q = 0.0
        for a in range(k):
            ea = xi[n, a] - t * xi[n, k + a]
            for b in range(k):
                eb = xi[n, b] - t * xi[n, k + b]
                q += ea * dW[n, a, b] * eb - 2.0 * xi[n, k + a] * W[n, a, b] * eb
        out[n] = q
    return out
