"""Segmentation metrics over an L x L confusion matrix.

``counts[i, j]`` is the number of pixels of true class i predicted as class j.
Classes whose denominator is zero are excluded from the class averages (the
divisor shrinks accordingly) unless ``zero_division="zero"`` is requested.
"""
from __future__ import annotations

import json

import numpy as np

from moespnet.layers import IGNORE_LABEL


class UndefinedMetricError(ValueError):
    """Metrics need at least one evaluated pixel."""


class LabelRangeError(ValueError):
    pass


class ConfusionMatrix:
    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None \
            else np.asarray(counts, dtype=np.int64).copy()
        if self.counts.shape != (num_classes, num_classes):
            raise ValueError(f"counts must be {num_classes}x{num_classes}, got {self.counts.shape}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred: np.ndarray, gt: np.ndarray, ignore_label: int = IGNORE_LABEL) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        L = self.num_classes
        keep = gt != ignore_label
        bad_gt = keep & ((gt < 0) | (gt >= L))
        bad_pred = keep & ((pred < 0) | (pred >= L))
        for bad, what in ((bad_gt, "ground-truth"), (bad_pred, "predicted")):
            if bad.any():
                pos = tuple(int(i) for i in np.argwhere(bad)[0])
                value = int((gt if what == "ground-truth" else pred)[pos])
                raise LabelRangeError(f"{what} label {value} at pixel {pos} outside 0..{L - 1}")
        idx = gt[keep].astype(np.int64) * L + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=L * L).reshape(L, L)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class counts differ")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def _require_pixels(self):
        if self.total == 0:
            raise UndefinedMetricError("no evaluated pixels; metrics are undefined")


def _class_mean(num: np.ndarray, den: np.ndarray, zero_division: str) -> float:
    ok = den > 0
    if zero_division == "exclude":
        return float((num[ok] / den[ok]).sum() / ok.sum())
    if zero_division == "zero":
        return float(np.where(ok, num / np.where(ok, den, 1), 0.0).sum() / len(den))
    raise ValueError(f"zero_division must be 'exclude' or 'zero', got {zero_division!r}")


def pixel_acc(cm: ConfusionMatrix) -> float:
    cm._require_pixels()
    c = cm.counts.astype(np.float64)
    return float(np.trace(c) / c.sum())


def mean_acc(cm: ConfusionMatrix, zero_division: str = "exclude") -> float:
    cm._require_pixels()
    c = cm.counts.astype(np.float64)
    return _class_mean(np.diag(c), c.sum(axis=1), zero_division)


def _iou_terms(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    c = cm.counts.astype(np.float64)
    diag = np.diag(c)
    union = -diag + c.sum(axis=1) + c.sum(axis=0)
    return diag, union


def per_class_iou(cm: ConfusionMatrix) -> list[float | None]:
    diag, union = _iou_terms(cm)
    return [float(d / u) if u > 0 else None for d, u in zip(diag, union)]


def mean_iou(cm: ConfusionMatrix, zero_division: str = "exclude") -> float:
    cm._require_pixels()
    diag, union = _iou_terms(cm)
    return _class_mean(diag, union, zero_division)


def weighted_iou(cm: ConfusionMatrix) -> float:
    cm._require_pixels()
    diag, union = _iou_terms(cm)
    freq = cm.counts.sum(axis=1).astype(np.float64)
    ok = union > 0
    return float((diag[ok] * freq[ok] / union[ok]).sum() / cm.total)


def all_metrics(cm: ConfusionMatrix, zero_division: str = "exclude") -> dict:
    return {
        "pixel_acc": pixel_acc(cm),
        "mean_acc": mean_acc(cm, zero_division),
        "mean_iou": mean_iou(cm, zero_division),
        "weighted_iou": weighted_iou(cm),
        "per_class_iou": per_class_iou(cm),
    }


def metrics_json(cm: ConfusionMatrix, zero_division: str = "exclude") -> str:
    return json.dumps(all_metrics(cm, zero_division))
