"""Confusion-matrix classification metrics and axis-aligned box IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClassificationReport:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_f1: float

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "macro_f1": self.macro_f1}


def confusion(preds, labels, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("preds and labels must be 1-D and equally long")
    for name, v in (("prediction", preds), ("label", labels)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} outside [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (labels, preds), 1)
    return m


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def report(m) -> ClassificationReport:
    """Per-class precision/recall/F1 (0/0 -> 0) and macro-F1 over classes present in the labels."""
    m = np.asarray(m, dtype=np.int64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise ValueError("confusion matrix must be square and nonempty")
    total = int(m.sum())
    if total < 1:
        raise ValueError("confusion matrix holds no samples")
    tp = np.diag(m)
    col = m.sum(axis=0)
    row = m.sum(axis=1)
    precision, recall, f1 = [], [], []
    for c in range(m.shape[0]):
        p = _ratio(int(tp[c]), int(col[c]))
        r = _ratio(int(tp[c]), int(row[c]))
        precision.append(p)
        recall.append(r)
        f1.append(_ratio(2 * p * r, p + r) if p + r else 0.0)
    present = [f1[c] for c in range(m.shape[0]) if row[c] > 0]
    macro = sum(present) / len(present)
    return ClassificationReport(int(tp.sum()) / total, precision, recall, f1, macro)


def classification_report(preds, labels, num_classes: int) -> ClassificationReport:
    return report(confusion(preds, labels, num_classes))


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"invalid box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def iou(a: Box, b: Box) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = w * h if w > 0 and h > 0 else 0.0
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0
