"""Frozen-extractor transfer learning and image preprocessing.

A pretrained model is cut at a layer boundary into a frozen extractor and
a trainable head. Features are computed once by the extractor, cached with
the extractor's fingerprint, and only the head is retrained: either with
binary weights (``head_kind="binary"``) or floating-point weights
(``head_kind="float"``).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FingerprintMismatchError, ShapeError
from .layers import BinaryDense, Dense, Layer
from .model import Model
from .modelio import fingerprint, parse_pnm, save_model
from .training import Dataset, TrainConfig, evaluate, fit


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitModel:
    extractor: list[Layer]
    head: list[Layer]
    split_index: int

    def extractor_model(self) -> Model:
        return Model(self.extractor)

    def head_model(self) -> Model:
        return Model(self.head)

    def extract(self, x, batch_size: int = 256):
        """Inference-mode extractor output, flattened to (samples, features)."""
        feats = self.extractor_model().predict(np.asarray(x, dtype=np.float64), batch_size)
        return feats.reshape(len(feats), -1)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        for layer in self.extractor:
            x = layer.forward(x, train=False)
        for layer in self.head:
            x = layer.forward(x, train=False)
        return x

    def predict(self, x, batch_size: int = 256):
        outs = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs)

    @property
    def fingerprint(self) -> str:
        return extractor_fingerprint(self.extractor_model())


def extractor_fingerprint(extractor: Model) -> str:
    """SHA-256 of the extractor's inference-only serialization."""
    return fingerprint(save_model(extractor, include_latent=False))


def split_model(model: Model, split_index: int | None = None) -> SplitModel:
    """Cut ``model`` before layer ``split_index`` (default: the last layer).

    Layers are copied, so training the head never touches ``model``.
    """
    n = len(model.layers)
    if split_index is None:
        split_index = n - 1
    if not 0 <= split_index < n:
        raise IndexError(f"split index {split_index} out of range for {n} layers (head must keep >= 1)")
    clone = model.copy()
    return SplitModel(clone.layers[:split_index], clone.layers[split_index:], split_index)


# ---------------------------------------------------------------------------
# Feature caches
# ---------------------------------------------------------------------------

@dataclass
class FeatureCache:
    features: np.ndarray
    labels: np.ndarray
    fingerprint: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ShapeError("features must be (samples, dim) with one label per sample")

    def dataset(self) -> Dataset:
        return Dataset(self.features, self.labels)

    def check(self, split_or_fingerprint):
        fp = split_or_fingerprint if isinstance(split_or_fingerprint, str) else split_or_fingerprint.fingerprint
        if fp != self.fingerprint:
            raise FingerprintMismatchError(f"cache built by extractor {self.fingerprint[:12]}, not {fp[:12]}")


def extract_features(extractor, dataset: Dataset, preprocess: "PreprocessConfig | None" = None,
                     batch_size: int = 256) -> FeatureCache:
    """Run the frozen extractor over ``dataset`` (center-crop preprocessing if given)."""
    if isinstance(extractor, SplitModel):
        extractor = extractor.extractor_model()
    x = dataset.x
    if preprocess is not None:
        x = np.stack([preprocess_image(img, replace(preprocess, train_mode=False)) for img in x])
    feats = extractor.predict(np.asarray(x, dtype=np.float64), batch_size) if len(extractor) else np.asarray(x, dtype=np.float64)
    return FeatureCache(feats.reshape(len(feats), -1), dataset.y, extractor_fingerprint(extractor))


# ---------------------------------------------------------------------------
# Head retraining
# ---------------------------------------------------------------------------

HEAD_KINDS = ("binary", "float")


def _new_head(split: SplitModel, feature_dim: int, head_kind: str, num_classes: int, seed: int) -> list[Layer]:
    if head_kind not in HEAD_KINDS:
        raise ValueError(f"head_kind must be one of {HEAD_KINDS}, got {head_kind!r}")
    prefix = [layer for layer in split.head[:-1]]
    last = split.head[-1]
    in_features = getattr(last, "in_features", None)
    if in_features is None:
        raise ShapeError("the head's final layer must be dense to be replaced")
    if not prefix and in_features != feature_dim:
        raise ShapeError(f"feature dim {feature_dim} does not match head input {in_features}")
    rng = np.random.default_rng(seed)
    cls = BinaryDense if head_kind == "binary" else Dense
    return prefix + [cls(in_features, num_classes, rng=rng)]


def _head_config(head_kind: str, config: TrainConfig) -> TrainConfig:
    # Binary heads always train with Adam.
    return replace(config, optimizer="adam", lr=config.lr if config.optimizer == "adam" else None) \
        if head_kind == "binary" else config


def retrain_head(split: SplitModel, cache: FeatureCache, head_kind: str, config: TrainConfig,
                 num_classes: int | None = None, eval_cache: FeatureCache | None = None, on_epoch=None):
    """Replace the head's final layer with a fresh ``head_kind`` layer and train it on ``cache``.

    Returns ``(head_model, metrics)``; metrics are computed on ``eval_cache``
    when given, otherwise on the training cache. ``on_epoch`` receives one
    :class:`~bnnx.training.EpochRecord` per epoch (validated on ``eval_cache``).
    """
    cache.check(split)
    if eval_cache is not None:
        eval_cache.check(split)
    num_classes = num_classes or int(cache.labels.max()) + 1
    split.head = _new_head(split, cache.features.shape[1], head_kind, num_classes, config.seed)
    head = split.head_model()
    val = eval_cache.dataset() if eval_cache is not None else None
    history = fit(head, cache.dataset(), _head_config(head_kind, config), val=val, on_epoch=on_epoch)
    return head, history.final


class FrozenExtractor(Layer):
    """Wraps a frozen extractor as a layer: inference-mode forward, no gradient."""

    kind = "FrozenExtractor"

    def __init__(self, extractor: Model):
        super().__init__()
        self.extractor = extractor

    def forward(self, x, train=False):
        out = self.extractor.forward(x, train=False)
        return out.reshape(len(out), -1)

    def backward(self, grad):
        return None


def retrain_head_online(split: SplitModel, dataset: Dataset, head_kind: str, config: TrainConfig,
                        num_classes: int | None = None):
    """Head training with the extractor evaluated inside every batch (no cache)."""
    feature_dim = int(np.prod(split.extractor_model().output_shape(dataset.x.shape[1:]))) if split.extractor \
        else int(np.prod(dataset.x.shape[1:]))
    num_classes = num_classes or dataset.num_classes
    split.head = _new_head(split, feature_dim, head_kind, num_classes, config.seed)
    full = Model([FrozenExtractor(split.extractor_model()), *split.head])
    fit(full, dataset, _head_config(head_kind, config))
    return split.head_model(), evaluate(full, dataset)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreprocessConfig:
    resize_long: int = 256
    crop: int = 224
    train_mode: bool = False
    shortest_side: bool = False

    def __post_init__(self):
        if self.crop > self.resize_long:
            raise ValueError("crop must not exceed the resize target")


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def _resize_axis(img, axis: int, size: int):
    n_in = img.shape[axis]
    if n_in == size:
        return img
    pos = (np.arange(size) + 0.5) * (n_in / size) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1] * img.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    # a + t*(b - a) keeps constant regions exactly constant
    return a + frac * (b - a)


def resize(image, out_h: int, out_w: int):
    """Bilinear resize of a C x H x W image (half-pixel centres, edge clamped)."""
    image = np.asarray(image, dtype=np.float64)
    return _resize_axis(_resize_axis(image, 1, out_h), 2, out_w)


def resize_longest(image, target: int):
    """Scale so the longer side equals ``target``; the other side is rounded (minimum 1)."""
    _, h, w = np.shape(image)
    if h >= w:
        out_h, out_w = target, max(1, _round_half_up(w * target / h))
    else:
        out_h, out_w = max(1, _round_half_up(h * target / w)), target
    return resize(image, out_h, out_w)


def resize_shortest(image, target: int):
    _, h, w = np.shape(image)
    if h <= w:
        out_h, out_w = target, max(1, _round_half_up(w * target / h))
    else:
        out_h, out_w = max(1, _round_half_up(h * target / w)), target
    return resize(image, out_h, out_w)


def crop(image, size: int, mode: str = "center", rng=None):
    image = np.asarray(image)
    _, h, w = image.shape
    if h < size or w < size:
        raise ShapeError(f"image {h}x{w} is smaller than the {size}x{size} crop")
    if mode == "center":
        top, left = (h - size) // 2, (w - size) // 2
    elif mode == "random":
        rng = rng if rng is not None else np.random.default_rng()
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return image[:, top : top + size, left : left + size]


def preprocess_image(image, cfg: PreprocessConfig, rng=None):
    """Resize then crop. Images left smaller than the crop are upscaled minimally, with a warning."""
    return crop(_resized(image, cfg), cfg.crop, "random" if cfg.train_mode else "center", rng)


PNM_SUFFIXES = (".pgm", ".ppm", ".pnm")


@dataclass
class ImageFolder:
    """Class-per-subdirectory netpbm images, resized once and cropped on demand."""

    images: list = field(default_factory=list)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    classes: list = field(default_factory=list)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    @classmethod
    def load(cls, root, preprocess: PreprocessConfig) -> "ImageFolder":
        root = Path(root)
        classes = sorted(p.name for p in root.iterdir() if p.is_dir())
        images, labels = [], []
        eval_cfg = replace(preprocess, train_mode=False)
        for ci, name in enumerate(classes):
            for f in sorted((root / name).iterdir()):
                if f.suffix.lower() in PNM_SUFFIXES:
                    img = parse_pnm(f.read_bytes()).to_tensor()
                    # Resize once; cropping happens per use.
                    images.append(_resized(img, eval_cfg))
                    labels.append(ci)
        if not images:
            raise ValueError(f"no netpbm images found under {root}")
        return cls(images, np.asarray(labels, np.int64), classes, preprocess)

    def dataset(self, train_mode: bool = False, rng=None) -> Dataset:
        mode = "random" if train_mode else "center"
        x = np.stack([crop(img, self.preprocess.crop, mode, rng) for img in self.images])
        return Dataset(x, self.labels)

    def epoch(self, epoch: int, seed: int) -> Dataset:
        return self.dataset(train_mode=True, rng=np.random.default_rng((seed, epoch)))


def _resized(img, cfg: PreprocessConfig):
    out = resize_shortest(img, cfg.resize_long) if cfg.shortest_side else resize_longest(img, cfg.resize_long)
    _, h, w = out.shape
    if min(h, w) < cfg.crop:
        scale = cfg.crop / min(h, w)
        new_h, new_w = max(cfg.crop, _round_half_up(h * scale)), max(cfg.crop, _round_half_up(w * scale))
        warnings.warn(f"resized image {h}x{w} is smaller than the {cfg.crop} crop; upscaling to {new_h}x{new_w}",
                      stacklevel=3)
        out = resize(out, new_h, new_w)
    return out
