"""Classification metrics: top-1 and macro precision / recall / F1."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass
class MetricsReport:
    top1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: list[list[int]] = field(default_factory=list)
    coarse_top1: Optional[float] = None

    def to_dict(self, with_confusion: bool = True) -> dict:
        d = asdict(self)
        if not with_confusion:
            d.pop("confusion")
        if self.coarse_top1 is None:
            d.pop("coarse_top1")
        return d


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> np.ndarray:
    """``conf[i, j]`` counts samples of true class ``i`` predicted as ``j``."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return conf


def metrics_from_confusion(conf: np.ndarray) -> MetricsReport:
    """Macro metrics averaged over the classes present in the ground truth.

    A class never predicted has precision 0; F1 is 0 when P + R = 0.
    """
    conf = np.asarray(conf, dtype=np.int64)
    total = int(conf.sum())
    if total == 0:
        raise ValueError("cannot compute metrics of an empty confusion matrix")
    tp = np.diag(conf)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    precisions, recalls, f1s = [], [], []
    for c in np.flatnonzero(support):
        p = float(tp[c]) / float(predicted[c]) if predicted[c] else 0.0
        r = float(tp[c]) / float(support[c])
        precisions.append(p)
        recalls.append(r)
        f1s.append(2.0 * p * r / (p + r) if p + r > 0 else 0.0)
    n = len(precisions)
    return MetricsReport(
        top1=float(np.trace(conf)) / float(total),
        macro_precision=math.fsum(precisions) / n,
        macro_recall=math.fsum(recalls) / n,
        macro_f1=math.fsum(f1s) / n,
        confusion=conf.tolist(),
    )


def classification_report(
    y_true: Sequence[int],
    y_pred: Sequence[int],
    num_classes: int,
    coarse_of: Optional[Sequence[int]] = None,
) -> MetricsReport:
    if len(y_true) == 0:
        raise ValueError("empty dataset")
    report = metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes))
    if coarse_of is not None:
        report.coarse_top1 = coarse_accuracy(y_true, y_pred, coarse_of)
    return report


def coarse_accuracy(y_true: Sequence[int], y_pred: Sequence[int], coarse_of: Sequence[int]) -> float:
    """Accuracy after mapping fine labels to their coarse group."""
    lookup = np.asarray(coarse_of)
    t = lookup[np.asarray(y_true, dtype=np.int64)]
    p = lookup[np.asarray(y_pred, dtype=np.int64)]
    return float(np.count_nonzero(t == p)) / float(len(t))
