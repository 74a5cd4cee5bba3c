"""Synthetic two-granularity image sets.

A species is told apart by the global silhouette of the object; classes of
the same species share the silhouette and differ only in the fine texture
painted inside it.  Fine labels are ``species * classes_per_species + k``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from apn.pyramid import ConfigError
from apn.rng import SplitMix64


def _disc(u, v):
    return u * u + v * v <= 1.0


def _square(u, v):
    return np.maximum(np.abs(u), np.abs(v)) <= 0.8


def _triangle(u, v):
    return (v <= 0.8) & (v >= -0.9) & (np.abs(u) <= (v + 0.9) * 0.55)


def _ring(u, v):
    r2 = u * u + v * v
    return (r2 <= 1.0) & (r2 >= 0.3)


def _cross(u, v):
    return ((np.abs(u) <= 0.35) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.35) & (np.abs(u) <= 1.0))


def _diamond(u, v):
    return np.abs(u) + np.abs(v) <= 1.05


def _hbar(u, v):
    return (np.abs(v) <= 0.45) & (np.abs(u) <= 1.0)


def _vbar(u, v):
    return (np.abs(u) <= 0.45) & (np.abs(v) <= 1.0)


SHAPES: list[Callable] = [_disc, _square, _triangle, _ring, _cross, _diamond, _hbar, _vbar]


def _texture(kind: int, yy, xx, phase: float, period: float):
    w = 2 * np.pi / period
    if kind == 0:
        wave = np.cos(w * yy + phase)
    elif kind == 1:
        wave = np.cos(w * xx + phase)
    elif kind == 2:
        wave = np.cos(w * (xx + yy) / np.sqrt(2) + phase)
    else:
        wave = np.cos(w * xx + phase) * np.cos(w * yy + phase)
    return np.sign(wave)


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 32
    species: int = 4
    classes_per_species: int = 2
    samples_per_class: int = 16
    val_per_class: int = 8
    noise: float = 0.05

    def __post_init__(self):
        if not 1 <= self.species <= len(SHAPES):
            raise ConfigError(f"species must be in [1, {len(SHAPES)}]")
        if not 1 <= self.classes_per_species <= 4:
            raise ConfigError("classes_per_species must be in [1, 4]")
        if self.image_size < 8 or self.samples_per_class < 1 or self.val_per_class < 0 or self.noise < 0:
            raise ConfigError("invalid synthetic dataset parameters")

    @property
    def num_classes(self) -> int:
        return self.species * self.classes_per_species


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x H x W, float32 in [0, 1]
    labels: np.ndarray  # fine labels
    coarse: np.ndarray  # coarse (species) labels
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def coarse_of(self) -> list[int]:
        """Coarse label of every fine class (fine classes must be present)."""
        table = {}
        for f, c in zip(self.labels.tolist(), self.coarse.tolist()):
            table[f] = c
        return [table.get(k, -1) for k in range(self.num_classes)]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.coarse, dtype="<i8").tobytes())
        return h.hexdigest()


def render(spec: SyntheticSpec, species: int, texture: int, rng: SplitMix64) -> np.ndarray:
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy = s / 2 - 0.5 + (rng.random() - 0.5) * 0.2 * s
    cx = s / 2 - 0.5 + (rng.random() - 0.5) * 0.2 * s
    radius = s * (0.30 + 0.08 * rng.random())
    mask = SHAPES[species]((xx - cx) / radius, (yy - cy) / radius)
    period = 4.0
    tex = _texture(texture, yy, xx, 2 * np.pi * rng.random(), period)
    fg = 0.6 + 0.2 * rng.random()
    bg = 0.1 + 0.15 * rng.random()
    gray = np.where(mask, fg + 0.25 * tex, bg)
    tint = 0.75 + 0.25 * rng.uniform(3)
    noise = rng.normal(3 * s * s).reshape(3, s, s) * spec.noise
    img = tint[:, None, None] * gray[None] + noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_generate(spec: SyntheticSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Balanced train and validation sets, deterministic under ``seed``."""
    root = SplitMix64(seed)
    out = []
    for split, per_class in (("train", spec.samples_per_class), ("val", spec.val_per_class)):
        images, labels, coarse = [], [], []
        for k in range(per_class):
            for sp in range(spec.species):
                for tx in range(spec.classes_per_species):
                    fine = sp * spec.classes_per_species + tx
                    rng = root.split(f"{split}/{fine}/{k}")
                    images.append(render(spec, sp, tx, rng))
                    labels.append(fine)
                    coarse.append(sp)
        s = spec.image_size
        out.append(
            Dataset(
                np.stack(images) if images else np.zeros((0, 3, s, s), np.float32),
                np.asarray(labels, dtype=np.int64),
                np.asarray(coarse, dtype=np.int64),
                spec.num_classes,
            )
        )
    return out[0], out[1]
