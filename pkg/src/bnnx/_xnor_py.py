"""Pure numpy XNOR-popcount kernels (fallback when the extension is not built)."""
import numpy as np

# Bound on the uint64 temporary in binary_gemm, in elements.
_CHUNK_ELEMS = 1 << 22


def pack_signs(m):
    rows, cols = m.shape
    wpr = (cols + 63) // 64
    bits = np.zeros((rows, wpr * 64), dtype=bool)
    bits[:, :cols] = m >= 0
    packed = np.packbits(bits, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False).reshape(rows, wpr)


def xnor_dot(a, b, n):
    mismatches = int(np.bitwise_count(np.bitwise_xor(a, b)).sum())
    return n - 2 * mismatches


def binary_gemm(a, bt, k):
    m, words = a.shape
    n = bt.shape[0]
    out = np.empty((m, n), dtype=np.int32)
    if m == 0 or n == 0:
        return out
    step = max(1, _CHUNK_ELEMS // max(1, n * words))
    for start in range(0, m, step):
        block = np.bitwise_xor(a[start:start + step, None, :], bt[None, :, :])
        mismatches = np.bitwise_count(block).sum(axis=2, dtype=np.int32)
        out[start:start + step] = k - 2 * mismatches
    return out


def im2col(x, kh, kw, stride, pad, pad_value, ho, wo):
    n, c = x.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im(cols, n, c, h, w, kh, kw, stride, pad, ho, wo):
    # (n, c, kh, kw, ho, wo) layout keeps each scatter slice contiguous in the source.
    src = np.ascontiguousarray(cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride] += src[:, :, ki, kj]
    return out[:, :, pad : pad + h, pad : pad + w]


def maxpool_forward(x, k, stride, ho, wo):
    n, c = x.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(grad, arg, h, w, k, stride):
    n, c, ho, wo = grad.shape
    rows = np.arange(ho)[:, None] * stride + arg // k
    cols = np.arange(wo)[None, :] * stride + arg % k
    plane = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    idx = (plane + rows * w + cols).ravel()
    return np.bincount(idx, weights=grad.ravel(), minlength=n * c * h * w).reshape(n, c, h, w)
