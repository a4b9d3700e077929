"""Binary road-segmentation metrics.

Dataset-level numbers are micro-averaged: confusions are summed over images
and the ratios computed once. Undefined ratios (zero denominator) are ``None``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

THRESHOLD = 0.5


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricReport:
    road_iou: float | None
    bg_iou: float | None
    miou: float | None
    recall: float | None
    precision: float | None
    f1: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def binarize(p, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(p) >= threshold).astype(np.uint8)


def _as_binary(mask, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{name} mask is not binary")
    return m.astype(bool)


def confusion(pred, gt) -> Confusion:
    p, g = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"confusion: shape mismatch {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Confusion(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def report(conf: Confusion) -> MetricReport:
    road = _ratio(conf.tp, conf.tp + conf.fp + conf.fn)
    bg = _ratio(conf.tn, conf.tn + conf.fp + conf.fn)
    miou = (road + bg) / 2 if road is not None and bg is not None else None
    recall = _ratio(conf.tp, conf.tp + conf.fn)
    precision = _ratio(conf.tp, conf.tp + conf.fp)
    f1 = None
    if recall is not None and precision is not None and recall + precision > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricReport(road, bg, miou, recall, precision, f1)


def dataset_confusion(preds: Iterable, gts: Iterable) -> Confusion:
    total = Confusion()
    for p, g in zip(preds, gts):
        total = total + confusion(p, g)
    return total


def evaluate(probs: np.ndarray, labels: np.ndarray) -> MetricReport:
    """Micro-averaged report for stacked probabilities (N×h×w) and labels."""
    return report(dataset_confusion(binarize(probs), labels))


def macro_miou(probs: np.ndarray, labels: np.ndarray) -> float | None:
    """Per-image mIoU averaged over images, skipping undefined ones."""
    vals = [report(confusion(binarize(p), g)).miou for p, g in zip(probs, labels)]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None
