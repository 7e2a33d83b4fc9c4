"""Optimizers, the training loop and accuracy metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError
from .layers import BatchNorm, softmax_cross_entropy

log = logging.getLogger(__name__)

DEFAULT_LR = {"adam": 1e-3, "sgd": 1e-2}


@dataclass
class Dataset:
    x: np.ndarray  # N x ... float
    y: np.ndarray  # N int labels

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ShapeError(f"{len(self.x)} samples but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param, **hyper) -> "AdamState":
        return cls(np.zeros(param.shape), np.zeros(param.shape), **hyper)


@dataclass
class SgdMomentumState:
    velocity: np.ndarray
    lr: float = 1e-2
    momentum: float = 0.9

    @classmethod
    def like(cls, param, **hyper) -> "SgdMomentumState":
        return cls(np.zeros(param.shape), **hyper)


def adam_step(param, grad, state: AdamState):
    """One bias-corrected Adam update, in place on ``param`` and ``state``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(f"parameter {param.shape} and gradient {grad.shape} disagree")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    param[...] = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param, state


def sgd_momentum_step(param, grad, state: SgdMomentumState):
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or state.velocity.shape != param.shape:
        raise ShapeError(f"parameter {param.shape} and gradient {grad.shape} disagree")
    state.velocity = state.momentum * state.velocity - state.lr * grad
    param[...] = param + state.velocity
    return param, state


def clip_binary_latents(model):
    """Clamp every binary-layer latent weight into [-1, 1]; float layers untouched."""
    for layer in model.layers:
        for name in layer.binary_params:
            w = getattr(layer, name)
            np.clip(w, -1.0, 1.0, out=w)
    return model


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    clip_binary_weights: bool = True

    def __post_init__(self):
        if self.optimizer not in DEFAULT_LR:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def learning_rate(self) -> float:
        return DEFAULT_LR[self.optimizer] if self.lr is None else self.lr


class Optimizer:
    """Per-parameter optimizer states for one model, keyed by (layer index, name)."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.states: dict = {}

    def _state(self, key, param):
        st = self.states.get(key)
        if st is None:
            c = self.config
            if c.optimizer == "adam":
                st = AdamState.like(param, lr=c.learning_rate, beta1=c.beta1, beta2=c.beta2, eps=c.eps)
            else:
                st = SgdMomentumState.like(param, lr=c.learning_rate, momentum=c.momentum)
            self.states[key] = st
        return st

    def step(self, model):
        update = adam_step if self.config.optimizer == "adam" else sgd_momentum_step
        for i, name, param, layer in model.parameters():
            grad = layer.grads.get(name)
            if grad is not None:
                update(param, grad, self._state((i, name), param))
        if self.config.clip_binary_weights:
            clip_binary_latents(model)


@dataclass
class Metrics:
    loss: float
    top1: float
    top5: float

    def as_dict(self):
        return {"loss": self.loss, "top1": self.top1, "top5": self.top5}


def topk_hits(logits, labels, k: int):
    """Boolean hit vector; ties rank the lower class index first."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("logits and labels do not conform")
    classes = logits.shape[1]
    if not 1 <= k <= classes:
        raise ValueError(f"k={k} out of range for {classes} classes")
    rows = np.arange(len(labels))
    target = logits[rows, labels][:, None]
    lower_index = np.arange(classes)[None, :] < labels[:, None]
    rank = (logits > target).sum(axis=1) + ((logits == target) & lower_index).sum(axis=1)
    return rank < k


def topk_accuracy(logits, labels, k: int) -> float:
    hits = topk_hits(logits, labels, k)
    return float(hits.mean()) if hits.size else 0.0


def _metrics(loss_sum, hits1, hits5, n):
    return Metrics(loss=loss_sum / n, top1=hits1 / n, top5=hits5 / n)


def evaluate(model, dataset: Dataset, batch_size: int = 256) -> Metrics:
    """Inference-mode metrics over the whole set; never mutates the model."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    loss_sum = 0.0
    hits1 = hits5 = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.x[start : start + batch_size]
        yb = dataset.y[start : start + batch_size]
        logits = model.forward(xb, train=False)
        loss, _ = softmax_cross_entropy(logits, yb)
        loss_sum += loss * len(yb)
        k5 = min(5, logits.shape[1])
        hits1 += int(topk_hits(logits, yb, 1).sum())
        hits5 += int(topk_hits(logits, yb, k5).sum())
    return _metrics(loss_sum, hits1, hits5, len(dataset))


def _has_batchnorm(model):
    return any(isinstance(layer, BatchNorm) for layer in model.layers)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffled sample order for one epoch (Fisher-Yates, seeded with seed + epoch)."""
    return np.random.default_rng(seed + epoch).permutation(n)


def train_epoch(model, dataset: Dataset, config: TrainConfig, optimizer: Optimizer, epoch: int = 0,
                on_step=None) -> Metrics:
    """One shuffled pass of forward, loss, backward, optimizer step and latent clipping.

    Returns metrics accumulated over the training-mode forwards. A trailing
    batch of one sample is skipped when the model has batch norm.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    order = epoch_order(n, config.seed, epoch)
    min_batch = 2 if _has_batchnorm(model) else 1
    model.prepare_training()
    loss_sum = 0.0
    hits1 = hits5 = seen = 0
    for start in range(0, n, config.batch_size):
        idx = order[start : start + config.batch_size]
        if len(idx) < min_batch:
            continue
        xb, yb = dataset.x[idx], dataset.y[idx]
        logits = model.forward(xb, train=True)
        loss, grad = softmax_cross_entropy(logits, yb)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {start}")
        model.backward(grad)
        optimizer.step(model)
        if on_step is not None:
            on_step(model)
        loss_sum += loss * len(idx)
        hits1 += int(topk_hits(logits, yb, 1).sum())
        hits5 += int(topk_hits(logits, yb, min(5, logits.shape[1])).sum())
        seen += len(idx)
    model.clear_cache()
    return _metrics(loss_sum, hits1, hits5, max(seen, 1))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_top1: float
    val_top1: float | None = None
    val_top5: float | None = None


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    final: Metrics | None = None


def fit(model, train, config: TrainConfig, val: Dataset | None = None, on_epoch=None,
        on_step=None) -> History:
    """Train for ``config.epochs`` epochs, evaluating on ``val`` after each when given.

    ``train`` is a :class:`Dataset` or any object whose ``epoch(epoch, seed)``
    returns the epoch's dataset (used for per-epoch random crops).
    """
    opt = Optimizer(config)
    history = History()
    for epoch in range(config.epochs):
        data = train.epoch(epoch, config.seed) if hasattr(train, "epoch") else train
        tm = train_epoch(model, data, config, opt, epoch, on_step=on_step)
        vm = evaluate(model, val) if val is not None else None
        rec = EpochRecord(epoch, tm.loss, tm.top1, vm.top1 if vm else None, vm.top5 if vm else None)
        history.records.append(rec)
        log.info("epoch %d loss %.4f train_top1 %.4f", epoch, tm.loss, tm.top1)
        if on_epoch is not None:
            on_epoch(rec)
    if val is None:
        val = train.dataset() if hasattr(train, "epoch") else train
    history.final = evaluate(model, val)
    return history
