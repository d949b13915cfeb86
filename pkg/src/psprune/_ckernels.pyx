# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in _fallback.py (same operation order)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, Py_ssize_t R, Py_ssize_t S,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - R) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - S) // stride + 1
    out_arr = np.empty((C * R * S, N * Ho * Wo), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t c, r, s, n, oh, ow, ih, iw, row, col
    for c in range(C):
        for r in range(R):
            for s in range(S):
                row = (c * R + r) * S + s
                col = 0
                for n in range(N):
                    for oh in range(Ho):
                        ih = oh * stride + r - pad
                        if ih < 0 or ih >= H:
                            for ow in range(Wo):
                                out[row, col] = 0.0
                                col += 1
                            continue
                        for ow in range(Wo):
                            iw = ow * stride + s - pad
                            if iw < 0 or iw >= W:
                                out[row, col] = 0.0
                            else:
                                out[row, col] = x[n, c, ih, iw]
                            col += 1
    return out_arr


def col2im(const double[:, ::1] cols, Py_ssize_t N, Py_ssize_t C, Py_ssize_t H,
           Py_ssize_t W, Py_ssize_t R, Py_ssize_t S, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t Ho = (H + 2 * pad - R) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - S) // stride + 1
    cdef Py_ssize_t Hp = H + 2 * pad, Wp = W + 2 * pad
    xp_arr = np.zeros((N, C, Hp, Wp), dtype=np.float64)
    cdef double[:, :, :, ::1] xp = xp_arr
    cdef Py_ssize_t c, r, s, n, oh, ow, row, col
    # (r, s) ascending per pixel, matching the fallback's slice loop
    for c in range(C):
        for r in range(R):
            for s in range(S):
                row = (c * R + r) * S + s
                col = 0
                for n in range(N):
                    for oh in range(Ho):
                        for ow in range(Wo):
                            xp[n, c, oh * stride + r, ow * stride + s] += cols[row, col]
                            col += 1
    if pad:
        return np.ascontiguousarray(xp_arr[:, :, pad:pad + H, pad:pad + W])
    return xp_arr


def column_sums(const double[:, ::1] m):
    cdef Py_ssize_t M = m.shape[0], P = m.shape[1], i, j
    out_arr = np.zeros(P, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(M):
        for j in range(P):
            out[j] += m[i, j]
    return out_arr


def matmul_ordered(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t M = a.shape[0], K = a.shape[1], P = b.shape[1], i, k, j
    cdef double aik
    out_arr = np.zeros((M, P), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(M):
        for k in range(K):
            aik = a[i, k]
            for j in range(P):
                out[i, j] += aik * b[k, j]
    return out_arr
