"""Confusion-matrix segmentation metrics."""
from __future__ import annotations

import numpy as np

from forec.core.ops import IGNORE_INDEX
from forec.errors import DataError, LabelError


class ConfusionMatrix:
    """C x C pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        c = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= c):
            raise LabelError(f"prediction outside [0, {c})", num_classes=c)
        valid = gt != IGNORE_INDEX
        g = gt[valid].astype(np.int64)
        if g.size and g.max() >= c:
            raise LabelError(f"ground truth label {int(g.max())} outside [0, {c})", value=int(g.max()),
                             num_classes=c)
        idx = g * c + pred[valid].astype(np.int64)
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else float("nan")

    def iou(self) -> list[float | None]:
        """Per-class IoU; None for classes absent from both prediction and ground truth."""
        tp = np.diag(self.counts)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        return [int(t) / int(u) if u else None for t, u in zip(tp, union)]

    def miou(self) -> tuple[list[float | None], float]:
        per_class = self.iou()
        present = [v for v in per_class if v is not None]
        if not present:
            raise DataError("no evaluable classes")
        return per_class, sum(present) / len(present)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def miou(cm: ConfusionMatrix) -> tuple[list[float | None], float]:
    return cm.miou()
