"""Dense tensors, bit-packed +/-1 matrices and the XNOR-popcount kernels.

Dense tensors are plain numpy arrays. A :class:`BitMatrix` packs one +/-1
element per bit, LSB-first within little-endian 64-bit words: element ``j``
of a row lives at bit ``j % 64`` of word ``j // 64``; bit value 1 means +1.
Bits past ``cols`` in the last word of a row are always zero.

The kernels come from the compiled ``bnnx._xnor`` extension when it is
importable, otherwise from the numpy fallback ``bnnx._xnor_py``. Setting
``BNNX_BACKEND=python`` forces the fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _xnor_py
from .errors import ShapeError

_kernels = _xnor_py
BACKEND = "python"
if os.environ.get("BNNX_BACKEND", "").lower() != "python":
    try:
        from . import _xnor as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _kernels = _compiled
        BACKEND = "cython"

# Largest inner dimension whose popcount results stay exact in float32.
MAX_K = 1 << 24


def available_backends() -> dict:
    """Map backend name to kernel module for every importable backend."""
    found = {"python": _xnor_py}
    try:
        from . import _xnor
    except ImportError:
        pass
    else:
        found["cython"] = _xnor
    return found


@dataclass(frozen=True)
class BitMatrix:
    rows: int
    cols: int
    bits: np.ndarray  # uint64, shape (rows, words_per_row)

    @property
    def words_per_row(self) -> int:
        return (self.cols + 63) // 64

    @property
    def nbytes_packed(self) -> int:
        """Storage needed for the payload at one bit per element."""
        return (self.rows * self.cols + 7) // 8

    def __eq__(self, other):
        if not isinstance(other, BitMatrix):
            return NotImplemented
        return (self.rows, self.cols) == (other.rows, other.cols) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.rows, self.cols, self.bits.tobytes()))

    def tail_mask(self) -> int:
        """Mask of the valid bits in the last word of a row (all ones if cols % 64 == 0)."""
        rem = self.cols % 64
        return (1 << 64) - 1 if rem == 0 else (1 << rem) - 1

    @classmethod
    def from_words(cls, rows: int, cols: int, words) -> "BitMatrix":
        """Wrap packed words, validating their shape and clearing nothing.

        Raises ShapeError if the word array has the wrong shape or a tail bit
        is set.
        """
        words = np.ascontiguousarray(words, dtype=np.uint64)
        wpr = (cols + 63) // 64
        if words.shape != (rows, wpr):
            raise ShapeError(f"expected words of shape {(rows, wpr)}, got {words.shape}")
        rem = cols % 64
        if rem and rows and np.any(words[:, -1] >> np.uint64(rem)):
            raise ShapeError("tail bits beyond cols must be zero")
        return cls(rows, cols, words)


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1")
        if self.padding < 0:
            raise ShapeError("padding must be >= 0")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        out = []
        for size, k in ((h, self.kernel_h), (w, self.kernel_w)):
            span = size + 2 * self.padding - k
            if span < 0 or span % self.stride:
                raise ShapeError(
                    f"extent {size} with kernel {k}, stride {self.stride}, padding {self.padding} "
                    "does not give an integral output size"
                )
            out.append(span // self.stride + 1)
        return out[0], out[1]

    @property
    def patch_size(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1, as float64."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def is_binary(x: np.ndarray) -> bool:
    """True if every element is exactly +1 or -1."""
    x = np.asarray(x)
    return x.size > 0 and bool(np.all(np.abs(x) == 1))


def pack_signs(m) -> BitMatrix:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"pack_signs needs a rank-2 tensor, got rank {m.ndim}")
    rows, cols = m.shape
    bits = _kernels.pack_signs(np.ascontiguousarray(m, dtype=np.float64))
    return BitMatrix(rows, cols, bits)


def unpack(b: BitMatrix) -> np.ndarray:
    if b.cols == 0:
        return np.zeros((b.rows, 0))
    raw = np.ascontiguousarray(b.bits).astype("<u8", copy=False).view(np.uint8)
    bits = np.unpackbits(raw.reshape(b.rows, -1), axis=1, bitorder="little")[:, : b.cols]
    return np.where(bits == 1, 1.0, -1.0)


def _row(b, i):
    if isinstance(b, BitMatrix):
        return b.bits[i], b.cols
    raise TypeError("expected a BitMatrix")


def xnor_dot(a: BitMatrix, b: BitMatrix, n: int | None = None, i: int = 0, j: int = 0) -> int:
    """+/-1 dot product of row ``i`` of ``a`` and row ``j`` of ``b``.

    Computed as ``2 * popcount(XNOR(a, b)) - n`` over the ``n`` valid bits.
    """
    if a.cols != b.cols or (n is not None and n != a.cols):
        raise ShapeError(f"row lengths differ: {a.cols} vs {b.cols} (n={n})")
    return int(_kernels.xnor_dot(np.ascontiguousarray(a.bits[i]), np.ascontiguousarray(b.bits[j]), a.cols))


def binary_gemm(a: BitMatrix, bt: BitMatrix) -> np.ndarray:
    """Exact +/-1 matrix product ``A @ B`` with ``B`` supplied transposed (n x k).

    Returns an (m, n) float64 array of integers.
    """
    if a.cols != bt.cols:
        raise ShapeError(f"inner dimensions differ: {a.cols} vs {bt.cols}")
    if a.cols > MAX_K:
        raise ShapeError(f"inner dimension {a.cols} exceeds {MAX_K}")
    out = _kernels.binary_gemm(np.ascontiguousarray(a.bits), np.ascontiguousarray(bt.bits), a.cols)
    return out.astype(np.float64)


def float_gemm(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def im2col(x, g: ConvGeometry, pad_value: float = 0.0) -> np.ndarray:
    """Unfold receptive fields into rows: (N*Ho*Wo) x (C*kh*kw).

    Rows run over (n, ho, wo); columns are channel-major, then kernel row,
    then kernel column. Padding contributes ``pad_value`` (literal zeros by
    default).
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != g.in_channels:
        raise ShapeError(f"expected N x {g.in_channels} x H x W input, got {x.shape}")
    ho, wo = g.output_hw(x.shape[2], x.shape[3])
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _kernels.im2col(x, g.kernel_h, g.kernel_w, g.stride, g.padding, float(pad_value), ho, wo)


def col2im(grad_cols, g: ConvGeometry, input_shape) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the input."""
    n, c, h, w = input_shape
    if c != g.in_channels:
        raise ShapeError(f"input has {c} channels, geometry expects {g.in_channels}")
    ho, wo = g.output_hw(h, w)
    grad_cols = np.asarray(grad_cols)
    if grad_cols.shape != (n * ho * wo, g.patch_size):
        raise ShapeError(f"expected columns of shape {(n * ho * wo, g.patch_size)}, got {grad_cols.shape}")
    grad_cols = np.ascontiguousarray(grad_cols, dtype=np.float64)
    return _kernels.col2im(grad_cols, n, c, h, w, g.kernel_h, g.kernel_w, g.stride, g.padding, ho, wo)
