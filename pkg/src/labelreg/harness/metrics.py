"""Confusion matrices and mean intersection-over-union."""

from __future__ import annotations

import numpy as np

from ..errors import DataError

VOID_ID = 255


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, gt: np.ndarray, pred: np.ndarray, void_id: int = VOID_ID) -> "ConfusionMatrix":
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise DataError(f"ground truth {gt.shape} and prediction {pred.shape} differ in shape")
        keep = gt != void_id
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        K = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= K or p.min() < 0 or p.max() >= K):
            raise DataError(f"class id outside 0..{K - 1} in confusion update")
        self.counts += np.bincount(g * K + p, minlength=K * K).reshape(K, K)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(gt: np.ndarray, pred: np.ndarray, num_classes: int, void_id: int = VOID_ID) -> ConfusionMatrix:
    return ConfusionMatrix(num_classes).update(gt, pred, void_id)


def miou(conf: ConfusionMatrix) -> tuple[list[float], float]:
    """Per-class IoU (NaN where a class is absent from both maps) and their mean.

    Classes with zero union are left out of the mean.
    """
    c = conf.counts
    tp = np.diag(c).astype(np.float64)
    union = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    present = union > 0
    if not present.any():
        raise DataError("mIoU undefined: every class has zero union")
    per_class = np.full(conf.num_classes, np.nan)
    per_class[present] = tp[present] / union[present]
    return per_class.tolist(), float(per_class[present].mean())


def pixel_accuracy(conf: ConfusionMatrix) -> float:
    return float(np.trace(conf.counts) / max(conf.total, 1))
