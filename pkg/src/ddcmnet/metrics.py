"""Confusion-matrix based segmentation scores."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np


class UndefinedClassWarning(UserWarning):
    """A class with no support (no true and no predicted pixels) was left out of the means."""


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = field(default=None)
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot add confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts, self.ignored + other.ignored)


def accumulate(cm: ConfusionMatrix, pred, label, ignore_id: Optional[int] = None) -> ConfusionMatrix:
    pred, label = np.asarray(pred), np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {label.shape}")
    c = cm.num_classes
    keep = np.ones(label.shape, dtype=bool) if ignore_id is None else label != ignore_id
    p, t = pred[keep].astype(np.int64), label[keep].astype(np.int64)
    for name, v in (("prediction", p), ("label", t)):
        if v.size and (v.min() < 0 or v.max() >= c):
            raise ValueError(f"{name} class id out of range [0, {c})")
    cm.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
    cm.ignored += int((~keep).sum())
    return cm


@dataclass(frozen=True)
class Scores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    iou: np.ndarray
    support: np.ndarray
    oa: float
    mean_f1: float
    mean_iou: float
    counted: tuple[int, ...]


def _ratio(num, den):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)


def scores(cm: ConfusionMatrix, excluded: Iterable[int] = ()) -> Scores:
    counts = cm.counts.astype(np.float64)
    if counts.sum() <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    excluded = set(int(e) for e in excluded)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    iou = _ratio(tp, tp + fp + fn)
    undefined = [c for c in range(cm.num_classes) if c not in excluded and np.isnan(f1[c])]
    if undefined:
        warnings.warn(f"classes {undefined} have no support and are left out of the means",
                      UndefinedClassWarning, stacklevel=2)
    counted = tuple(c for c in range(cm.num_classes) if c not in excluded and not np.isnan(f1[c]))
    mean = (lambda v: float(np.mean(v[list(counted)]))) if counted else (lambda v: float("nan"))
    return Scores(
        precision=_ratio(tp, tp + fp), recall=_ratio(tp, tp + fn), f1=f1, iou=iou,
        support=counts.sum(axis=1).astype(np.int64),
        oa=float(tp.sum() / counts.sum()), mean_f1=mean(f1), mean_iou=mean(iou), counted=counted)


def normalize(cm: ConfusionMatrix):
    """Row-normalised matrix plus a boolean mask of rows that had no support."""
    counts = cm.counts.astype(np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    empty = rows[:, 0] == 0
    out = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    return out, empty
