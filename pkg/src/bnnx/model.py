"""Sequential models and the compact architecture grammar used by the CLI.

Grammar: a comma-separated list of layer tokens::

    bconv:OUT:K[:STRIDE[:PAD]]   binary convolution, K x K kernel
    bdense:OUT                   binary dense layer
    dense:OUT                    floating-point dense layer
    bn                           batch norm over the current channel axis
    sign                         sign activation (straight-through gradient)
    pool:W[:S]                   max pooling, window W, stride S (default W)
    flatten

``OUT`` may be the word ``classes``, substituted with the class count at
build time. A preset name (``mlp``, ``convnet``, ``alexnet``) may be used in
place of a token list.
"""
from __future__ import annotations

import copy

import numpy as np

from .errors import ArchError, ShapeError
from .layers import LAYER_KINDS, BatchNorm, BinaryConv2d, BinaryDense, Dense, Flatten, Layer, MaxPool2d, Sign
from .tensors import ConvGeometry

PRESETS = {
    "mlp": "flatten,bdense:256,bn,sign,dense:classes",
    "convnet": "bconv:32:3:1:1,pool:2,bn,sign,bconv:64:3:1:1,pool:2,bn,sign,flatten,bdense:256,bn,sign,dense:classes",
    # AlexNet-shaped; needs 227 x 227 inputs for integral output extents.
    "alexnet": (
        "bconv:96:11:4:0,pool:3:2,bn,sign,bconv:256:5:1:2,pool:3:2,bn,sign,"
        "bconv:384:3:1:1,bn,sign,bconv:384:3:1:1,bn,sign,bconv:256:3:1:1,pool:3:2,bn,sign,"
        "flatten,bdense:4096,bn,sign,bdense:4096,bn,sign,dense:classes"
    ),
}


class Model:
    """An ordered stack of layers."""

    def __init__(self, layers: list[Layer] | None = None):
        self.layers: list[Layer] = list(layers or [])

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def forward(self, x, train: bool = False):
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
            if grad is None:  # first parametrised layer skipped its input gradient
                break
        return grad

    def predict(self, x, batch_size: int = 256):
        """Inference-mode forward in fixed-size batches."""
        outs = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0,))

    def parameters(self):
        """Yield ``(layer_index, name, array, layer)`` for every trainable tensor."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                yield i, name, arr, layer

    def clear_cache(self):
        for layer in self.layers:
            layer.clear_cache()

    def prepare_training(self):
        """Skip the input gradient of the first parametrised layer (nothing consumes it)."""
        first = True
        for layer in self.layers:
            if hasattr(layer, "needs_input_grad"):
                layer.needs_input_grad = not first
                first = False
            elif layer.params():
                first = False

    def output_shape(self, input_shape):
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = tuple(layer.output_shape(shape))
        return shape

    def copy(self) -> "Model":
        clone = copy.deepcopy(self)
        clone.clear_cache()
        return clone

    def set_shift_mode(self, enabled: bool = True):
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                if enabled and layer.shift is None:
                    layer.fold()
                layer.use_shift = enabled

    def summary(self) -> list[str]:
        return [layer.describe() for layer in self.layers]


def expand_arch(arch: str) -> str:
    arch = arch.strip()
    return PRESETS.get(arch, arch)


def _ints(tok, parts, lo, hi, num_classes):
    if not lo <= len(parts) <= hi:
        raise ArchError(f"token {tok!r} expects {lo}..{hi} arguments")
    vals = []
    for p in parts:
        if p == "classes":
            if num_classes is None:
                raise ArchError("'classes' used but no class count given")
            vals.append(int(num_classes))
            continue
        try:
            vals.append(int(p))
        except ValueError:
            raise ArchError(f"bad integer {p!r} in token {tok!r}") from None
    return vals


def build_model(arch: str, input_shape, num_classes: int | None = None, seed: int = 0) -> Model:
    """Instantiate ``arch`` for inputs of shape ``input_shape`` (without the batch axis)."""
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in input_shape)
    layers: list[Layer] = []
    tokens = [t.strip() for t in expand_arch(arch).split(",") if t.strip()]
    if not tokens:
        raise ArchError("empty architecture")
    try:
        for tok in tokens:
            name, *parts = tok.split(":")
            name = name.lower()
            if name == "bconv":
                out, k, *rest = _ints(tok, parts, 2, 4, num_classes)
                stride, pad = (rest + [1, 0][len(rest):])[:2]
                if len(shape) != 3:
                    raise ArchError(f"{tok!r} needs a C x H x W input, have {shape}")
                layer = BinaryConv2d(ConvGeometry(shape[0], out, k, k, stride, pad), rng=rng)
            elif name in ("bdense", "dense"):
                (out,) = _ints(tok, parts, 1, 1, num_classes)
                if len(shape) != 1:
                    raise ArchError(f"{tok!r} needs a flat input, have {shape}; add 'flatten'")
                cls = BinaryDense if name == "bdense" else Dense
                layer = cls(shape[0], out, rng=rng)
            elif name == "bn":
                _ints(tok, parts, 0, 0, num_classes)
                layer = BatchNorm(shape[0])
            elif name == "sign":
                _ints(tok, parts, 0, 0, num_classes)
                layer = Sign()
            elif name == "pool":
                window, *rest = _ints(tok, parts, 1, 2, num_classes)
                layer = MaxPool2d(window, rest[0] if rest else None)
            elif name == "flatten":
                _ints(tok, parts, 0, 0, num_classes)
                layer = Flatten()
            else:
                raise ArchError(f"unknown layer token {tok!r}")
            shape = tuple(layer.output_shape(shape))
            layers.append(layer)
    except ShapeError as exc:
        raise ArchError(f"architecture does not fit input {tuple(input_shape)}: {exc}") from exc
    return Model(layers)


__all__ = ["Model", "build_model", "expand_arch", "PRESETS", "LAYER_KINDS"]
