"""Layer forward/backward rules.

Binary layers keep real-valued latent weights and binarize them with
``sign`` (sign(0) = +1) on every forward pass. Gradients computed for the
binarized weights are applied to the latent copy directly; the optimizer
step clips latents back into [-1, 1].

Every layer follows the same protocol: ``forward(x, train)`` caches what
``backward`` needs only when ``train`` is true, and ``backward(grad)``
returns the input gradient and fills ``layer.grads``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensors
from .errors import ShapeError, StateError
from .tensors import ConvGeometry, binary_gemm, col2im, im2col, is_binary, pack_signs, sign

PARAM_DTYPE = np.float32


# ---------------------------------------------------------------------------
# Functional kernels
# ---------------------------------------------------------------------------

def sign_forward(x):
    return sign(x)


def sign_backward_ste(x_saved, grad_out):
    """Straight-through estimator: pass ``grad_out`` where |x| <= 1, zero elsewhere."""
    x_saved = np.asarray(x_saved)
    grad_out = np.asarray(grad_out)
    if x_saved.shape != grad_out.shape:
        raise ShapeError(f"shape mismatch: {x_saved.shape} vs {grad_out.shape}")
    return np.where(np.abs(x_saved) <= 1, grad_out, np.zeros_like(grad_out))


def ap2_exponent(x):
    """Integer exponent ``round(log2|x|)``; undefined (returned as 0) for x == 0."""
    x = np.asarray(x, dtype=np.float64)
    mag = np.abs(x)
    with np.errstate(divide="ignore"):
        e = np.round(np.log2(np.where(mag > 0, mag, 1.0)))
    return e.astype(np.int64)


def ap2(x):
    """Nearest power of two (in the log domain), keeping the sign; ap2(0) = 0."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.sign(arr) * np.ldexp(1.0, ap2_exponent(arr))
    return float(out) if out.ndim == 0 else out


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not conform")
    n, classes = logits.shape
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f"label out of range for {classes} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def maxpool_forward(x, window: int, stride: int):
    """Max pooling over ``window`` x ``window`` patches.

    Returns the pooled tensor and the within-window argmax (row-major,
    first occurrence wins, i.e. the lowest linear index on ties).
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects N x C x H x W, got {x.shape}")
    ho, wo = _pool_out(x.shape[2], x.shape[3], window, stride)
    x = np.ascontiguousarray(x, dtype=np.float64)
    return tensors._kernels.maxpool_forward(x, window, stride, ho, wo)


def maxpool_backward(grad_out, arg, input_shape, window: int, stride: int):
    n, c, h, w = input_shape
    ho, wo = _pool_out(h, w, window, stride)
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (n, c, ho, wo) or arg.shape != grad_out.shape:
        raise ShapeError("pooling gradient does not match the cached forward")
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    arg = np.ascontiguousarray(arg, dtype=np.int64)
    return tensors._kernels.maxpool_backward(grad_out, arg, h, w, window, stride)


def _pool_out(h, w, window, stride):
    if window < 1 or stride < 1:
        raise ShapeError("pooling window and stride must be >= 1")
    out = []
    for size in (h, w):
        span = size - window
        if span < 0 or span % stride:
            raise ShapeError(f"extent {size} with window {window}, stride {stride} is not integral")
        out.append(span // stride + 1)
    return out[0], out[1]


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c):
            raise ShapeError("batch norm tensors disagree on channel count")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, PARAM_DTYPE),
            beta=np.zeros(channels, PARAM_DTYPE),
            running_mean=np.zeros(channels, PARAM_DTYPE),
            running_var=np.ones(channels, PARAM_DTYPE),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _channel_view(x, channels):
    """Reshape to (rows, channels) with channels last; returns the view and an undo function."""
    if x.ndim == 2:
        if x.shape[1] != channels:
            raise ShapeError(f"expected {channels} channels, got {x.shape[1]}")
        return x, lambda y: y
    if x.ndim == 4:
        if x.shape[1] != channels:
            raise ShapeError(f"expected {channels} channels, got {x.shape[1]}")
        n, c, h, w = x.shape
        flat = x.transpose(0, 2, 3, 1).reshape(-1, c)
        return flat, lambda y: y.reshape(n, h, w, c).transpose(0, 3, 1, 2)
    raise ShapeError(f"batch norm expects rank 2 or 4 input, got rank {x.ndim}")


def batchnorm_forward(x, s: BatchNormState, mode: str = "infer"):
    """Per-channel normalization. Returns ``(out, cache)``; cache is None in infer mode.

    In train mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch`` (the running
    variance uses the unbiased batch variance).
    """
    x = np.asarray(x, dtype=np.float64)
    flat, undo = _channel_view(x, s.channels)
    if mode == "train":
        m = flat.shape[0]
        if x.shape[0] < 2:
            raise StateError("train-mode batch norm needs a batch of at least 2")
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + s.eps)
        xhat = (flat - mean) * inv_std
        s.running_mean[...] = s.momentum * s.running_mean + (1 - s.momentum) * mean
        s.running_var[...] = s.momentum * s.running_var + (1 - s.momentum) * var * (m / (m - 1))
        out = xhat * s.gamma + s.beta
        return undo(out), (xhat, inv_std, x.shape)
    if mode != "infer":
        raise ValueError(f"unknown batch norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(s.running_var.astype(np.float64) + s.eps)
    out = (flat - s.running_mean) * (inv_std * s.gamma) + s.beta
    return undo(out), None


def batchnorm_backward(s: BatchNormState, cache, grad_out):
    if cache is None:
        raise StateError("batch norm backward needs a cached training forward")
    xhat, inv_std, shape = cache
    g, undo = _channel_view(np.asarray(grad_out, dtype=np.float64), s.channels)
    if g.shape != xhat.shape:
        raise ShapeError("gradient does not match cached forward")
    m = g.shape[0]
    grad_beta = g.sum(axis=0)
    grad_gamma = (g * xhat).sum(axis=0)
    dxhat = g * s.gamma
    grad_in = (inv_std / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return undo(grad_in), grad_gamma, grad_beta


@dataclass
class ShiftFold:
    """Batch norm folded to ``y = sign * 2**exponent * x + offset`` per channel."""

    exponent: np.ndarray  # int32
    sign: np.ndarray  # int8 in {-1, 0, 1}
    offset: np.ndarray  # float32

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        flat, undo = _channel_view(x, self.exponent.shape[0])
        out = np.ldexp(flat, self.exponent) * self.sign + self.offset
        return undo(out)


def fold_bn_to_shift(s: BatchNormState) -> ShiftFold:
    var = np.asarray(s.running_var, dtype=np.float64)
    if np.any(var <= 0):
        raise StateError("running variance must be positive to fold batch norm")
    scale = s.gamma / np.sqrt(var + s.eps)
    q = ap2(scale)
    return ShiftFold(
        exponent=ap2_exponent(scale).astype(np.int32),
        sign=np.sign(scale).astype(np.int8),
        offset=(s.beta - q * s.running_mean).astype(PARAM_DTYPE),
    )


# ---------------------------------------------------------------------------
# Layer objects
# ---------------------------------------------------------------------------

def glorot_uniform(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(PARAM_DTYPE)


class Layer:
    kind = "Layer"
    binary_params: tuple[str, ...] = ()

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def params(self) -> dict[str, np.ndarray]:
        return {}

    @property
    def has_cache(self) -> bool:
        return self._cache is not None

    def clear_cache(self):
        self._cache = None

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}.backward called without a training-mode forward")
        return self._cache

    def output_shape(self, input_shape):
        return input_shape

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind


class Sign(Layer):
    kind = "Sign"

    def forward(self, x, train=False):
        self._cache = np.asarray(x) if train else None
        return sign_forward(x)

    def backward(self, grad):
        return sign_backward_ste(self._need_cache(), grad)


class Flatten(Layer):
    kind = "Flatten"

    def forward(self, x, train=False):
        self._cache = x.shape if train else None
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._need_cache())

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


class MaxPool2d(Layer):
    kind = "MaxPool2d"

    def __init__(self, window: int, stride: int | None = None):
        super().__init__()
        self.window = window
        self.stride = stride or window
        _pool_out(self.window, self.window, self.window, self.stride)

    def forward(self, x, train=False):
        out, arg = maxpool_forward(x, self.window, self.stride)
        self._cache = (arg, x.shape) if train else None
        return out

    def backward(self, grad):
        arg, shape = self._need_cache()
        return maxpool_backward(grad, arg, shape, self.window, self.stride)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        return (c, *_pool_out(h, w, self.window, self.stride))

    def describe(self):
        return f"MaxPool2d(window={self.window}, stride={self.stride})"


class BatchNorm(Layer):
    """Batch normalization over axis 1, with an optional folded shift mode for inference."""

    kind = "BatchNorm"

    def __init__(self, channels: int | None = None, state: BatchNormState | None = None):
        super().__init__()
        self.state = state if state is not None else BatchNormState.fresh(channels)
        self.shift: ShiftFold | None = None
        self.use_shift = False

    @property
    def channels(self):
        return self.state.channels

    def params(self):
        return {"gamma": self.state.gamma, "beta": self.state.beta}

    def fold(self) -> ShiftFold:
        self.shift = fold_bn_to_shift(self.state)
        return self.shift

    def forward(self, x, train=False):
        if train:
            out, self._cache = batchnorm_forward(x, self.state, "train")
            return out
        self._cache = None
        if self.use_shift:
            if self.shift is None:
                raise StateError("shift mode requested before fold()")
            return self.shift.apply(x)
        return batchnorm_forward(x, self.state, "infer")[0]

    def backward(self, grad):
        grad_in, gg, gb = batchnorm_backward(self.state, self._need_cache(), grad)
        self.grads = {"gamma": gg, "beta": gb}
        return grad_in

    def describe(self):
        return f"BatchNorm({self.channels}{', shift' if self.use_shift else ''})"


class Dense(Layer):
    """Floating-point affine layer ``x @ W.T + b``; W has shape (out, in)."""

    kind = "Dense"

    def __init__(self, in_features: int, out_features: int, rng=None, weight=None, bias=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = weight if weight is not None else glorot_uniform(rng, in_features, out_features, (out_features, in_features))
        self.bias = bias if bias is not None else np.zeros(out_features, PARAM_DTYPE)
        self.needs_input_grad = True

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Dense expects (batch, {self.in_features}), got {x.shape}")
        self._cache = x if train else None
        return tensors.float_gemm(x, self.weight.T) + self.bias

    def backward(self, grad):
        x = self._need_cache()
        self.grads = {"weight": grad.T @ x, "bias": grad.sum(axis=0)}
        return grad @ self.weight if self.needs_input_grad else None

    def output_shape(self, input_shape):
        return (self.out_features,)

    def describe(self):
        return f"Dense({self.in_features} -> {self.out_features})"


class BinaryDense(Layer):
    """Binary-weight dense layer; latent weight shape is (out, in), i.e. pre-transposed.

    ``path`` selects the kernel for +/-1 inputs: ``"auto"`` uses XNOR-popcount,
    ``"float"`` forces the float reference. Real-valued inputs always take the
    float path with binarized weights.
    """

    kind = "BinaryDense"
    binary_params = ("weight",)

    def __init__(self, in_features: int, out_features: int, rng=None, weight=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = weight if weight is not None else glorot_uniform(rng, in_features, out_features, (out_features, in_features))
        self.path = "auto"
        self.needs_input_grad = True

    def params(self):
        return {"weight": self.weight}

    def binarized(self):
        return pack_signs(self.weight)

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"BinaryDense expects (batch, {self.in_features}), got {x.shape}")
        wb = sign(self.weight)
        if is_binary(x) and self.path == "auto":
            out = binary_gemm(pack_signs(x), pack_signs(self.weight))
        else:
            out = tensors.float_gemm(x, wb.T)
        self._cache = (x, wb) if train else None
        return out

    def backward(self, grad):
        x, wb = self._need_cache()
        self.grads = {"weight": grad.T @ x}
        return grad @ wb if self.needs_input_grad else None

    def output_shape(self, input_shape):
        return (self.out_features,)

    def describe(self):
        return f"BinaryDense({self.in_features} -> {self.out_features})"


class BinaryConv2d(Layer):
    """Binary-weight convolution via im2col + GEMM; latent kernel shape (Cout, Cin, kh, kw).

    With +/-1 inputs the padded patch matrix is binarized as a whole, so
    zero padding becomes +1 and the XNOR kernel stays exact.
    """

    kind = "BinaryConv2d"
    binary_params = ("weight",)

    def __init__(self, geometry: ConvGeometry, rng=None, weight=None):
        super().__init__()
        self.geometry = g = geometry
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (g.out_channels, g.in_channels, g.kernel_h, g.kernel_w)
        fan_in = g.in_channels * g.kernel_h * g.kernel_w
        fan_out = g.out_channels * g.kernel_h * g.kernel_w
        self.weight = weight if weight is not None else glorot_uniform(rng, fan_in, fan_out, shape)
        self.path = "auto"
        self.needs_input_grad = True

    def params(self):
        return {"weight": self.weight}

    def binarized(self):
        return pack_signs(self.weight.reshape(self.geometry.out_channels, -1))

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        g = self.geometry
        n, _, h, w = x.shape if x.ndim == 4 else (None, None, None, None)
        binary_in = is_binary(x)
        # Padding with +1 is exactly sign() of the zero-padded patch matrix.
        cols = im2col(x, g, pad_value=1.0 if binary_in else 0.0)
        ho, wo = g.output_hw(h, w)
        w2 = self.weight.reshape(g.out_channels, -1)
        wb = sign(w2)
        if binary_in and self.path == "auto":
            out = binary_gemm(pack_signs(cols), pack_signs(w2))
        else:
            out = cols @ wb.T
        self._cache = (cols, wb, x.shape) if train else None
        return out.reshape(n, ho, wo, g.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        cols, wb, shape = self._need_cache()
        g = self.geometry
        gm = np.asarray(grad).transpose(0, 2, 3, 1).reshape(-1, g.out_channels)
        self.grads = {"weight": (gm.T @ cols).reshape(self.weight.shape)}
        if not self.needs_input_grad:
            return None
        return col2im(gm @ wb, g, shape)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.geometry.in_channels:
            raise ShapeError(f"expected {self.geometry.in_channels} channels, got {c}")
        return (self.geometry.out_channels, *self.geometry.output_hw(h, w))

    def describe(self):
        g = self.geometry
        return (f"BinaryConv2d({g.in_channels} -> {g.out_channels}, k={g.kernel_h}x{g.kernel_w}, "
                f"s={g.stride}, p={g.padding})")


LAYER_KINDS = {cls.kind: cls for cls in (BinaryDense, BinaryConv2d, Dense, BatchNorm, Sign, MaxPool2d, Flatten)}
