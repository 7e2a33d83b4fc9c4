# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled XNOR-popcount kernels.

Same contract as :mod:`bnnx._xnor_py`; callers go through :mod:`bnnx.tensors`,
which validates shapes before dispatching here.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int32_t

cnp.import_array()

cdef extern from *:
    """
    static inline int bnnx_popcount64(unsigned long long x) {
        return __builtin_popcountll(x);
    }
    """
    int bnnx_popcount64(unsigned long long x) nogil


def pack_signs(const double[:, ::1] m):
    cdef Py_ssize_t rows = m.shape[0], cols = m.shape[1]
    cdef Py_ssize_t wpr = (cols + 63) // 64
    out = np.zeros((rows, wpr), dtype=np.uint64)
    cdef uint64_t[:, ::1] bits = out
    cdef Py_ssize_t i, j
    cdef uint64_t word
    with nogil:
        for i in range(rows):
            for j in range(cols):
                if m[i, j] >= 0.0:
                    bits[i, j >> 6] |= (<uint64_t>1) << (j & 63)
    return out


def xnor_dot(const uint64_t[::1] a, const uint64_t[::1] b, Py_ssize_t n):
    # Tails are zero in both rows, so XOR never counts padding.
    cdef Py_ssize_t w
    cdef long long mismatches = 0
    for w in range(a.shape[0]):
        mismatches += bnnx_popcount64(a[w] ^ b[w])
    return n - 2 * mismatches


def binary_gemm(const uint64_t[:, ::1] a, const uint64_t[:, ::1] bt, Py_ssize_t k):
    cdef Py_ssize_t m = a.shape[0], n = bt.shape[0], words = a.shape[1]
    out = np.empty((m, n), dtype=np.int32)
    cdef int32_t[:, ::1] c = out
    cdef Py_ssize_t i, j, w
    cdef int mismatches
    cdef const uint64_t* arow
    cdef const uint64_t* brow
    with nogil:
        for i in range(m):
            arow = &a[i, 0] if words > 0 else NULL
            for j in range(n):
                brow = &bt[j, 0] if words > 0 else NULL
                mismatches = 0
                for w in range(words):
                    mismatches += bnnx_popcount64(arow[w] ^ brow[w])
                c[i, j] = <int32_t>(k - 2 * mismatches)
    return out


def im2col(const double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
           Py_ssize_t pad, double pad_value, Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out = np.empty((n * ho * wo, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t b, oy, ox, ch, ky, kx, iy, ix, row, col
    with nogil:
        row = 0
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    col = 0
                    for ch in range(c):
                        for ky in range(kh):
                            iy = oy * stride + ky - pad
                            for kx in range(kw):
                                ix = ox * stride + kx - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    cols[row, col] = x[b, ch, iy, ix]
                                else:
                                    cols[row, col] = pad_value
                                col += 1
                    row += 1
    return out


def col2im(const double[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t ho, Py_ssize_t wo):
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] x = out
    cdef Py_ssize_t b, oy, ox, ch, ky, kx, iy, ix, row, col
    with nogil:
        row = 0
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    col = 0
                    for ch in range(c):
                        for ky in range(kh):
                            iy = oy * stride + ky - pad
                            for kx in range(kw):
                                ix = ox * stride + kx - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    x[b, ch, iy, ix] += cols[row, col]
                                col += 1
                    row += 1
    return out


def maxpool_forward(const double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride,
                    Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    out = np.empty((n, c, ho, wo), dtype=np.float64)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] o = out
    cdef long long[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, ch, oy, ox, ky, kx
    cdef double best, v
    cdef long long besti
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        best = x[b, ch, oy * stride, ox * stride]
                        besti = 0
                        for ky in range(k):
                            for kx in range(k):
                                v = x[b, ch, oy * stride + ky, ox * stride + kx]
                                # strict > keeps the first (lowest index) maximum
                                if v > best:
                                    best = v
                                    besti = ky * k + kx
                        o[b, ch, oy, ox] = best
                        a[b, ch, oy, ox] = besti
    return out, arg


def maxpool_backward(const double[:, :, :, ::1] grad, const long long[:, :, :, ::1] arg,
                     Py_ssize_t h, Py_ssize_t w, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], ho = grad.shape[2], wo = grad.shape[3]
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] g = out
    cdef Py_ssize_t b, ch, oy, ox
    cdef long long i
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        i = arg[b, ch, oy, ox]
                        g[b, ch, oy * stride + i // k, ox * stride + i % k] += grad[b, ch, oy, ox]
    return out
