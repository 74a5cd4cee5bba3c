"""Deterministic SGD training and evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from apn import checkpoint, ops
from apn.augment import augment_batch
from apn.metrics import MetricsReport, classification_report
from apn.model import APN
from apn.optim import sgd_nesterov_step
from apn.pyramid import ConfigError
from apn.rng import SplitMix64
from apn.synth import Dataset
from apn.tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (120, 200, 260)
    lr_decay_factor: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 300
    seed: int = 0
    augment: bool = True
    eval_every: int = 1
    eval_scale: float = 1.0

    def __post_init__(self):
        d = list(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigError("lr_decay_epochs must be strictly increasing")
        if d and (d[0] < 0 or d[-1] >= self.epochs):
            raise ConfigError("lr_decay_epochs must lie in [0, epochs)")
        if self.epochs < 1 or self.batch_size < 2 or self.eval_every < 1:
            raise ConfigError("epochs >= 1, batch_size >= 2 and eval_every >= 1 are required")
        if self.eval_scale < 1.0:
            raise ConfigError("eval_scale must be >= 1")
        if self.lr0 < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("invalid optimizer hyper-parameters")


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Step schedule: ``lr0 * factor ** (number of decay epochs <= epoch)``."""
    passed = sum(1 for e in config.lr_decay_epochs if epoch >= e)
    return config.lr0 * config.lr_decay_factor**passed


def batches(n: int, batch_size: int, order: list[int]) -> list[list[int]]:
    """Split ``order`` into batches; a trailing single sample joins the previous batch."""
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2].extend(out.pop())
    return out


def predict(model: APN, images: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits and predicted labels; restores the previous mode."""
    was_training = model.training
    model.eval()
    dtype = model.fc.weight.dtype
    logits = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits.append(model(Tensor(images[i : i + batch_size].astype(dtype, copy=False))).data)
    model.train(was_training)
    out = np.concatenate(logits) if logits else np.zeros((0, model.spec.num_classes))
    return out, out.argmax(axis=1)


def evaluate(model: APN, dataset: Dataset, eval_scale: float = 1.0) -> MetricsReport:
    """Top-1, macro metrics and coarse accuracy of ``model`` on ``dataset``.

    ``eval_scale`` > 1 applies the resize-then-centre-crop test transform.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    images = dataset.images
    if eval_scale != 1.0:
        images = augment_batch(images, SplitMix64(0), train=False, eval_scale=eval_scale)
    _, pred = predict(model, images)
    return classification_report(dataset.labels, pred, dataset.num_classes, dataset.coarse_of)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_top1: float = -1.0
    best_state: bytes = b""
    final_state: bytes = b""


def _check_dataset(model: APN, dataset: Dataset, what: str) -> None:
    if dataset.num_classes != model.spec.num_classes:
        raise ConfigError(f"{what} has {dataset.num_classes} classes, model predicts {model.spec.num_classes}")


def train(
    model: APN,
    train_set: Dataset,
    config: TrainConfig,
    val_set: Optional[Dataset] = None,
    out_dir: Optional[str] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train in place and keep the state with the best validation top-1.

    Without ``val_set`` the training split selects the best epoch.  With
    ``out_dir`` the per-epoch log goes to ``metrics.jsonl`` and the best and
    final states to ``best.ckpt`` / ``last.ckpt``.
    """
    _check_dataset(model, train_set, "training set")
    if val_set is not None:
        _check_dataset(model, val_set, "validation set")
    if len(train_set) < 2:
        raise ValueError("training needs at least two samples")
    root = SplitMix64(config.seed)
    dtype = model.fc.weight.dtype
    result = TrainResult()
    log_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8")
    try:
        for epoch in range(config.epochs):
            lr = lr_at(config, epoch)
            order = root.split(f"shuffle/{epoch}").permutation(len(train_set))
            aug_rng = root.split(f"augment/{epoch}")
            model.train()
            losses = []
            for b, idx in enumerate(batches(len(train_set), config.batch_size, order)):
                images = train_set.images[idx]
                if config.augment:
                    images = augment_batch(images, aug_rng)
                model.zero_grad()
                logits = model(Tensor(images.astype(dtype, copy=False)))
                loss = ops.softmax_cross_entropy(logits, train_set.labels[idx])
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
                backward(loss)
                sgd_nesterov_step(model.parameters(), lr, config.momentum, config.weight_decay)
                losses.append(value)
            record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))}
            last = epoch == config.epochs - 1
            if (epoch + 1) % config.eval_every == 0 or last:
                train_m = evaluate(model, train_set, config.eval_scale)
                record["train_top1"] = train_m.top1
                score = train_m.top1
                if val_set is not None and len(val_set):
                    val_m = evaluate(model, val_set, config.eval_scale)
                    record.update({f"val_{k}": v for k, v in val_m.to_dict(with_confusion=False).items()})
                    score = val_m.top1
                if score > result.best_top1:
                    result.best_top1, result.best_epoch = score, epoch
                    result.best_state = checkpoint.encode(model.state())
            result.history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if on_epoch:
                on_epoch(record)
            log.debug("epoch %d %s", epoch, record)
        result.final_state = checkpoint.encode(model.state())
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        with open(os.path.join(out_dir, "best.ckpt"), "wb") as fh:
            fh.write(result.best_state)
        with open(os.path.join(out_dir, "last.ckpt"), "wb") as fh:
            fh.write(result.final_state)
    return result
