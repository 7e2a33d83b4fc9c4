"""Desk-scale 28 x 28 handwritten-digit dataset.

Built from the 8 x 8 handwritten digits bundled with scikit-learn: each
sample is a random affine warp (scale, rotation, shear, translation) of one
source digit, with stroke-contrast jitter and pixel noise, quantized to
uint8. Train and test samples are drawn from disjoint source digits so the
test set measures generalization to unseen writers.
"""
from __future__ import annotations

import numpy as np

SIDE = 28


def _source_digits():
    try:
        from sklearn.datasets import load_digits
    except ImportError as exc:  # pragma: no cover - exercised only without sklearn
        raise ImportError("synthetic digits need scikit-learn (pip install artifact[synth])") from exc
    d = load_digits()
    return d.images / 16.0, d.target.astype(np.int64)


def _warp(src, rng):
    """Bilinearly sample an 8 x 8 digit onto a 28 x 28 canvas under a random affine map."""
    scale = rng.uniform(2.2, 3.0)
    theta = np.deg2rad(rng.uniform(-15, 15))
    shear = rng.uniform(-0.2, 0.2)
    shift = rng.uniform(-2.5, 2.5, size=2)
    c, s = np.cos(theta), np.sin(theta)
    fwd = scale * np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]])
    inv = np.linalg.inv(fwd)
    centre_out = (SIDE - 1) / 2 + shift
    centre_in = 3.5
    yy, xx = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64)
    pts = np.stack([yy.ravel() - centre_out[0], xx.ravel() - centre_out[1]])
    sy, sx = inv @ pts + centre_in
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = sy - y0
    fx = sx - x0
    padded = np.pad(src, 1)

    def at(yi, xi):
        ok = (yi >= -1) & (yi <= 8) & (xi >= -1) & (xi <= 8)
        return np.where(ok, padded[np.clip(yi + 1, 0, 9), np.clip(xi + 1, 0, 9)], 0.0)

    top = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx
    bot = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx
    return (top * (1 - fy) + bot * fy).reshape(SIDE, SIDE)


def make_digits(n_train: int = 6000, n_test: int = 2000, seed: int = 0, test_fraction: float = 0.3):
    """Return ``(train_images, train_labels, test_images, test_labels)`` as uint8 arrays.

    Images have shape (N, 28, 28) with values 0..255.
    """
    images, labels = _source_digits()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    cut = int(round(len(order) * (1 - test_fraction)))
    pools = (order[:cut], order[cut:])
    out = []
    for pool, count in zip(pools, (n_train, n_test)):
        picks = rng.choice(pool, size=count, replace=True)
        batch = np.empty((count, SIDE, SIDE), dtype=np.uint8)
        for i, k in enumerate(picks):
            img = _warp(images[k], rng)
            img = np.clip(img * rng.uniform(0.8, 1.4), 0, 1) ** rng.uniform(0.6, 1.2)
            img = np.clip(img + rng.normal(0, 0.04, img.shape), 0, 1)
            batch[i] = np.round(img * 255).astype(np.uint8)
        out.extend([batch, labels[picks].astype(np.uint8)])
    return tuple(out)
