"""Compiled single-sample SGD loops for the two training networks.

One call runs one epoch: for every index in ``order`` it takes a relaxed
gradient step on the selected sample and projects all blocks back onto
rotations.  The arrays ``A, B, C, D`` (shape ``(L, n/2)``) and ``diag`` are
updated in place.  ``lo``/``hi`` hold the pair indices of every block.

Return value is ``(loss_sum, resets, bad_layer, bad_block)``; when
``abort_on_degenerate`` is set and a block degenerates, the epoch stops early
with ``bad_layer >= 0`` and the parameters left unprojected at that step.
"""

import math

import numpy as np
from numba import njit

DEGENERACY_RTOL = 1e-12


@njit(cache=True)
def _project(A, B, C, D, abort_on_degenerate):
    L, h = A.shape
    resets = 0
    for l in range(L):
        for k in range(h):
            a, b, c, d = A[l, k], B[l, k], C[l, k], D[l, k]
            s = a + d
            t = b - c
            eta = math.sqrt(s * s + t * t)
            scale = max(1.0, abs(a), abs(b), abs(c), abs(d))
            if not eta > DEGENERACY_RTOL * scale:
                if abort_on_degenerate:
                    return -1, l, k
                s, t, eta = 1.0, 0.0, 1.0
                resets += 1
            A[l, k] = s / eta
            B[l, k] = t / eta
            C[l, k] = -t / eta
            D[l, k] = s / eta
    return resets, -1, -1


@njit(cache=True)
def sgd_epoch_symmetric(A, B, C, D, diag, lo, hi, X, Y, order, lr_q, lr_d, abort_on_degenerate):
    L, h = A.shape
    n = diag.shape[0]
    V = np.empty((L + 1, n))
    U = np.empty((L + 1, n))
    g = np.empty(n)
    g2 = np.empty(n)
    GA = np.empty((L, h))
    GB = np.empty((L, h))
    GC = np.empty((L, h))
    GD = np.empty((L, h))
    gdiag = np.empty(n)
    loss_sum = 0.0
    resets = 0
    for s in range(order.shape[0]):
        j = order[s]
        # Q^T x, layer 1 first
        for i in range(n):
            V[0, i] = X[j, i]
        for l in range(L):
            for k in range(h):
                i0 = lo[l, k]
                i1 = hi[l, k]
                x0 = V[l, i0]
                x1 = V[l, i1]
                V[l + 1, i0] = A[l, k] * x0 + C[l, k] * x1
                V[l + 1, i1] = B[l, k] * x0 + D[l, k] * x1
        for i in range(n):
            U[L, i] = diag[i] * V[L, i]
        # Q (D Q^T x), layer L first
        for l in range(L - 1, -1, -1):
            for k in range(h):
                i0 = lo[l, k]
                i1 = hi[l, k]
                x0 = U[l + 1, i0]
                x1 = U[l + 1, i1]
                U[l, i0] = A[l, k] * x0 + B[l, k] * x1
                U[l, i1] = C[l, k] * x0 + D[l, k] * x1
        loss = 0.0
        for i in range(n):
            r = U[0, i] - Y[j, i]
            loss += r * r
            g[i] = 2.0 * r
        loss_sum += loss
        # back through Q_1 .. Q_L
        for l in range(L):
            for k in range(h):
                i0 = lo[l, k]
                i1 = hi[l, k]
                u0 = U[l + 1, i0]
                u1 = U[l + 1, i1]
                e0 = g[i0]
                e1 = g[i1]
                GA[l, k] = e0 * u0
                GB[l, k] = e0 * u1
                GC[l, k] = e1 * u0
                GD[l, k] = e1 * u1
                g2[i0] = A[l, k] * e0 + C[l, k] * e1
                g2[i1] = B[l, k] * e0 + D[l, k] * e1
            for i in range(n):
                g[i] = g2[i]
        for i in range(n):
            gdiag[i] = g[i] * V[L, i]
            g[i] = diag[i] * g[i]
        # back through Q_L^T .. Q_1^T; shared blocks accumulate
        for l in range(L - 1, -1, -1):
            for k in range(h):
                i0 = lo[l, k]
                i1 = hi[l, k]
                v0 = V[l, i0]
                v1 = V[l, i1]
                e0 = g[i0]
                e1 = g[i1]
                GA[l, k] += e0 * v0
                GC[l, k] += e0 * v1
                GB[l, k] += e1 * v0
                GD[l, k] += e1 * v1
                g2[i0] = A[l, k] * e0 + B[l, k] * e1
                g2[i1] = C[l, k] * e0 + D[l, k] * e1
            for i in range(n):
                g[i] = g2[i]
        for l in range(L):
            for k in range(h):
                A[l, k] -= lr_q * GA[l, k]
                B[l, k] -= lr_q * GB[l, k]
                C[l, k] -= lr_q * GC[l, k]
                D[l, k] -= lr_q * GD[l, k]
        for i in range(n):
            diag[i] -= lr_d * gdiag[i]
        r, bl, bk = _project(A, B, C, D, abort_on_degenerate)
        if r < 0:
            return loss_sum, resets, bl, bk
        resets += r
    return loss_sum, resets, -1, -1


@njit(cache=True)
def sgd_epoch_rotation(A, B, C, D, lo, hi, X, Y, order, lr_q, abort_on_degenerate):
    L, h = A.shape
    n = X.shape[1]
    U = np.empty((L + 1, n))
    g = np.empty(n)
    g2 = np.empty(n)
    GA = np.empty((L, h))
    GB = np.empty((L, h))
    GC = np.empty((L, h))
    GD = np.empty((L, h))
    loss_sum = 0.0
    resets = 0
    for s in range(order.shape[0]):
        j = order[s]
        for i in range(n):
            U[L, i] = X[j, i]
        for l in range(L - 1, -1, -1):
            for k in range(h):
                i0 = lo[l, k]
                i1 = hi[l, k]
                x0 = U[l + 1, i0]
                x1 = U[l + 1, i1]
                U[l, i0] = A[l, k] * x0 + B[l, k] * x1
                U[l, i1] = C[l, k] * x0 + D[l, k] * x1
        loss = 0.0
        for i in range(n):
            r = U[0, i] - Y[j, i]
            loss += r * r
            g[i] = 2.0 * r
        loss_sum += loss
        for l in range(L):
            for k in range(h):
                i0 = lo[l, k]
                i1 = hi[l, k]
                u0 = U[l + 1, i0]
                u1 = U[l + 1, i1]
                e0 = g[i0]
                e1 = g[i1]
                GA[l, k] = e0 * u0
                GB[l, k] = e0 * u1
                GC[l, k] = e1 * u0
                GD[l, k] = e1 * u1
                g2[i0] = A[l, k] * e0 + C[l, k] * e1
                g2[i1] = B[l, k] * e0 + D[l, k] * e1
            for i in range(n):
                g[i] = g2[i]
        for l in range(L):
            for k in range(h):
                A[l, k] -= lr_q * GA[l, k]
                B[l, k] -= lr_q * GB[l, k]
                C[l, k] -= lr_q * GC[l, k]
                D[l, k] -= lr_q * GD[l, k]
        r, bl, bk = _project(A, B, C, D, abort_on_degenerate)
        if r < 0:
            return loss_sum, resets, bl, bk
        resets += r
    return loss_sum, resets, -1, -1
