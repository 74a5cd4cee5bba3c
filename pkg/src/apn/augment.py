"""Training-time flips and padded crops; eval-time resize and centre crop."""

from __future__ import annotations

import numpy as np

from apn.ops import interpolation_matrix
from apn.rng import SplitMix64

# Test images are resized by 256/224 before the centre crop.
EVAL_SCALE = 256 / 224


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def random_crop(image: np.ndarray, dy: int, dx: int, pad: int) -> np.ndarray:
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad : pad + h, pad : pad + w] = image
    return padded[:, dy : dy + h, dx : dx + w].copy()


def resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    ry = interpolation_matrix(image.shape[1], h)
    rx = interpolation_matrix(image.shape[2], w)
    return (ry @ image.astype(np.float64) @ rx.T).astype(image.dtype)


def center_crop(image: np.ndarray, h: int, w: int) -> np.ndarray:
    top = (image.shape[1] - h) // 2
    left = (image.shape[2] - w) // 2
    return image[:, top : top + h, left : left + w].copy()


def augment(
    image: np.ndarray, rng: SplitMix64, train: bool = True, pad: int = 4, eval_scale: float = 1.0
) -> np.ndarray:
    """One ``C x H x W`` image.

    Train: horizontal flip with p = 0.5, then a crop of the zero-padded image
    at a uniform offset in ``[0, 2 * pad]``; draws are flip, dy, dx.
    Eval: resize by ``eval_scale`` and take the centre crop of the original
    size.  Scale 1 is the centre crop of the padded image, i.e. the image
    itself; ``EVAL_SCALE`` is the full-size 256/224 protocol.
    """
    _, h, w = image.shape
    if not train:
        if eval_scale == 1.0:
            return image.copy()
        big = resize(image, round(h * eval_scale), round(w * eval_scale))
        return center_crop(big, h, w)
    flip = rng.random() < 0.5
    dy = rng.randint(2 * pad + 1)
    dx = rng.randint(2 * pad + 1)
    out = hflip(image) if flip else image
    return random_crop(out, dy, dx, pad)


def augment_batch(
    images: np.ndarray, rng: SplitMix64, train: bool = True, pad: int = 4, eval_scale: float = 1.0
) -> np.ndarray:
    return np.stack([augment(img, rng, train, pad, eval_scale) for img in images])
