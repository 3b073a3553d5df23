"""Confusion-matrix accumulation and IoU scoring in the unified target space."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = counts

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    merge = __add__

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt, ignore_id: Optional[int] = None) -> ConfusionMatrix:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    keep = gt != ignore_id if ignore_id is not None else np.ones(gt.shape, bool)
    C = cm.num_classes
    for name, arr in (("ground truth", gt), ("prediction", pred)):
        bad = keep & ((arr < 0) | (arr >= C))
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValueError(f"{name} id {arr[idx]} at pixel {idx} is outside 0..{C - 1}")
    counts = np.bincount(C * gt[keep] + pred[keep], minlength=C * C).reshape(C, C)
    return ConfusionMatrix(C, cm.counts + counts)


@dataclass
class IoUReport:
    per_class_iou: np.ndarray  # nan where the class has an empty union
    defined: np.ndarray
    support: np.ndarray  # ground-truth pixel count per class
    miou: float

    def to_csv(self, class_names: Optional[Sequence[str]] = None) -> str:
        names = class_names or [str(i) for i in range(len(self.per_class_iou))]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "iou", "support"])
        for name, iou, ok, n in zip(names, self.per_class_iou, self.defined, self.support):
            w.writerow([name, f"{iou:.6f}" if ok else "undefined", int(n)])
        return buf.getvalue()

    def summary(self) -> str:
        return f"miou={self.miou:.6f} classes={int(self.defined.sum())}/{len(self.defined)}"


def iou_report(cm: ConfusionMatrix) -> IoUReport:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(0) + counts.sum(1) - tp
    defined = union > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[defined] = tp[defined] / union[defined]
    return IoUReport(iou, defined, cm.counts.sum(1), float(iou[defined].mean()))
