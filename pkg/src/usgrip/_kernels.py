"""Compiled loops behind the tensor primitives.

Every kernel accumulates sequentially in a fixed order (kernel row-major,
input channel innermost) with no fast-math flags, so results are bit-exact
against a naive scalar loop and reproducible between runs. Kernels are
dtype-generic: numba specialises them for float32, float64 and int32.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv_forward(xp, w, b, stride, out):
    """out[n,i,j,o] = sum_{ki,kj,c} xp[n,i*s+ki,j*s+kj,c] * w[ki,kj,c,o] + b[o]."""
    N, Ho, Wo, Co = out.shape
    kh, kw, Ci, _ = w.shape
    acc = np.empty(Co, dtype=out.dtype)
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                acc[:] = 0
                for ki in range(kh):
                    for kj in range(kw):
                        for c in range(Ci):
                            v = xp[n, i * stride + ki, j * stride + kj, c]
                            for o in range(Co):
                                acc[o] += v * w[ki, kj, c, o]
                for o in range(Co):
                    out[n, i, j, o] = acc[o] + b[o]


@njit(cache=True)
def conv_weight_grad(xp, g, stride, dw, db):
    N, Ho, Wo, Co = g.shape
    kh, kw, Ci, _ = dw.shape
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                for o in range(Co):
                    db[o] += g[n, i, j, o]
                for ki in range(kh):
                    for kj in range(kw):
                        for c in range(Ci):
                            v = xp[n, i * stride + ki, j * stride + kj, c]
                            for o in range(Co):
                                dw[ki, kj, c, o] += v * g[n, i, j, o]


@njit(cache=True)
def conv_input_grad(g, wt, stride, dxp):
    """wt is the kernel transposed to [kh, kw, Cout, Cin]."""
    N, Ho, Wo, Co = g.shape
    kh, kw, _, Ci = wt.shape
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                for ki in range(kh):
                    for kj in range(kw):
                        r = i * stride + ki
                        s = j * stride + kj
                        for o in range(Co):
                            gv = g[n, i, j, o]
                            for c in range(Ci):
                                dxp[n, r, s, c] += gv * wt[ki, kj, o, c]


@njit(cache=True)
def dense_forward(x, w, b, out):
    N, K = x.shape
    M = w.shape[1]
    acc = np.empty(M, dtype=out.dtype)
    for n in range(N):
        acc[:] = 0
        for k in range(K):
            v = x[n, k]
            for m in range(M):
                acc[m] += v * w[k, m]
        for m in range(M):
            out[n, m] = acc[m] + b[m]


@njit(cache=True)
def dense_backward(x, wt, g, dx, dw, db):
    """wt is the weight matrix transposed to [M, K]."""
    N, K = x.shape
    M = g.shape[1]
    for n in range(N):
        for m in range(M):
            db[m] += g[n, m]
        for k in range(K):
            v = x[n, k]
            for m in range(M):
                dw[k, m] += v * g[n, m]
        for m in range(M):
            gv = g[n, m]
            for k in range(K):
                dx[n, k] += gv * wt[m, k]


@njit(cache=True)
def maxpool_forward(x, out, arg):
    """2x2 / stride 2. arg holds the winning window slot (0..3, row-major, first max wins)."""
    N, Ho, Wo, C = out.shape
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(C):
                    best = x[n, 2 * i, 2 * j, c]
                    slot = 0
                    v = x[n, 2 * i, 2 * j + 1, c]
                    if v > best:
                        best = v
                        slot = 1
                    v = x[n, 2 * i + 1, 2 * j, c]
                    if v > best:
                        best = v
                        slot = 2
                    v = x[n, 2 * i + 1, 2 * j + 1, c]
                    if v > best:
                        best = v
                        slot = 3
                    out[n, i, j, c] = best
                    arg[n, i, j, c] = slot


@njit(cache=True)
def maxpool_backward(g, arg, dx):
    N, Ho, Wo, C = g.shape
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(C):
                    s = arg[n, i, j, c]
                    dx[n, 2 * i + s // 2, 2 * j + s % 2, c] += g[n, i, j, c]


@njit(cache=True)
def channel_sums(x2d, out):
    """Column sums of a [rows, C] array, accumulated top to bottom in float64."""
    rows, C = x2d.shape
    for r in range(rows):
        for c in range(C):
            out[c] += x2d[r, c]


@njit(cache=True)
def channel_sq_dev(x2d, mean, out):
    rows, C = x2d.shape
    for r in range(rows):
        for c in range(C):
            d = x2d[r, c] - mean[c]
            out[c] += d * d


@njit(cache=True)
def channel_minmax(x2d, lo, hi):
    rows, C = x2d.shape
    for r in range(rows):
        for c in range(C):
            v = x2d[r, c]
            if v < lo[c]:
                lo[c] = v
            if v > hi[c]:
                hi[c] = v


@njit(cache=True)
def block_mean_u8(img, factor, out):
    """Block mean of a u8 image, rounded half away from zero (half up for u8)."""
    Ho, Wo = out.shape
    area = factor * factor
    half = area // 2
    for i in range(Ho):
        for j in range(Wo):
            s = 0
            for a in range(factor):
                for b in range(factor):
                    s += img[i * factor + a, j * factor + b]
            out[i, j] = (s + half) // area
