"""Pure-numpy versions of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same floating-point operation order, so the two are bit-identical.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, R, S, stride, pad):
    N, C, H, W = x.shape
    Ho = (H + 2 * pad - R) // stride + 1
    Wo = (W + 2 * pad - S) // stride + 1
    if pad:
        xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
        xp[:, :, pad:pad + H, pad:pad + W] = x
    else:
        xp = np.ascontiguousarray(x)
    sN, sC, sH, sW = xp.strides
    view = as_strided(
        xp,
        shape=(C, R, S, N, Ho, Wo),
        strides=(sC, sH, sW, sN, sH * stride, sW * stride),
        writeable=False,
    )
    out = np.empty((C * R * S, N * Ho * Wo))
    out.reshape(C, R, S, N, Ho, Wo)[...] = view
    return out


def col2im(cols, N, C, H, W, R, S, stride, pad):
    Ho = (H + 2 * pad - R) // stride + 1
    Wo = (W + 2 * pad - S) // stride + 1
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    view = cols.reshape(C, R, S, N, Ho, Wo)
    for r in range(R):
        for s in range(S):
            patch = view[:, r, s].transpose(1, 0, 2, 3)
            xp[:, :, r:r + stride * (Ho - 1) + 1:stride, s:s + stride * (Wo - 1) + 1:stride] += patch
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])
    return xp


def column_sums(m):
    """Sum the rows of a 2-D array strictly top to bottom."""
    m = np.ascontiguousarray(m, dtype=np.float64)
    out = np.zeros(m.shape[1])
    # cumsum is a running sum, so the order is fixed by definition
    if m.shape[0]:
        out += np.cumsum(m, axis=0)[-1]
    return out


def matmul_ordered(a, b):
    M, K = a.shape
    P = b.shape[1]
    out = np.zeros((M, P))
    for k in range(K):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out
