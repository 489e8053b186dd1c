"""Segmentation metrics: accuracy, IoU, confusion matrices, label densities."""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CoordinateError, EmptyLabelsError
from .points import LabelPoint


@dataclass
class EvalReport:
    pixel_accuracy: float
    per_class_iou: dict
    mean_iou: float
    confusion: np.ndarray  # [n, n] counts, truth on rows
    evaluated_pixels: int
    label_distribution: Optional[dict] = None  # class -> fraction of submitted points

    def to_kv_lines(self):
        lines = [
            f"pixel_accuracy={self.pixel_accuracy:.6f}",
            f"mean_iou={self.mean_iou:.6f}",
            f"evaluated_pixels={self.evaluated_pixels}",
        ]
        for cls in sorted(self.per_class_iou):
            lines.append(f"iou.{cls}={self.per_class_iou[cls]:.6f}")
        for i, row in enumerate(self.confusion):
            lines.append(f"confusion.{i}=" + ",".join(str(int(v)) for v in row))
        if self.label_distribution is not None:
            for cls in sorted(self.label_distribution):
                lines.append(f"label_share.{cls}={self.label_distribution[cls]:.6f}")
        return lines

    def to_dict(self):
        return {
            "pixel_accuracy": self.pixel_accuracy,
            "mean_iou": self.mean_iou,
            "per_class_iou": {int(k): float(v) for k, v in self.per_class_iou.items()},
            "confusion": self.confusion.astype(int).tolist(),
            "evaluated_pixels": int(self.evaluated_pixels),
            "label_distribution": (
                None if self.label_distribution is None
                else {int(k): float(v) for k, v in self.label_distribution.items()}),
        }


def _argmax_raster(pred):
    # lexicographic tie-break: the smallest class index wins
    return np.asarray(pred).argmax(axis=0)


def report_from_confusion(confusion, label_distribution=None) -> EvalReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    total = int(confusion.sum())
    if total == 0:
        raise EmptyLabelsError("no evaluated pixels")
    acc = float(np.trace(confusion) / total)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = {}
    for cls in range(confusion.shape[0]):
        if union[cls] > 0:  # skip classes absent from both pred and truth
            per_class[cls] = float(tp[cls] / union[cls])
    mean_iou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(pixel_accuracy=acc, per_class_iou=per_class, mean_iou=mean_iou,
                      confusion=confusion, evaluated_pixels=total,
                      label_distribution=label_distribution)


def evaluate(pred, truth, n_classes=None, label_distribution=None) -> EvalReport:
    """Compare predictions to truth.

    pred: class raster [H, W] or probability map [n, H, W] (argmaxed).
    truth: class raster [H, W] aligned with pred, or a LabelPoint sequence
    in pred's coordinate frame.
    """
    pred = np.asarray(pred)
    if pred.ndim == 3:
        if n_classes is None:
            n_classes = pred.shape[0]
        pred = _argmax_raster(pred)
    h, w = pred.shape
    if isinstance(truth, np.ndarray) and truth.ndim == 2:
        if truth.shape != pred.shape:
            raise CoordinateError(
                f"truth extent {truth.shape} does not match prediction {pred.shape}")
        t = truth.reshape(-1).astype(np.int64)
        p = pred.reshape(-1).astype(np.int64)
    else:
        points = list(truth)
        if not points:
            raise EmptyLabelsError("empty truth point set")
        t = np.empty(len(points), dtype=np.int64)
        p = np.empty(len(points), dtype=np.int64)
        for i, (row, col, cls) in enumerate(points):
            if not (0 <= row < h and 0 <= col < w):
                raise CoordinateError(f"truth point ({row}, {col}) outside {h}x{w}")
            t[i] = cls
            p[i] = pred[row, col]
    if n_classes is None:
        n_classes = 0
    # truth may carry classes the model does not know yet (pre-addition)
    n_classes = int(max(n_classes, t.max() + 1, p.max() + 1))
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (t, p), 1)
    return report_from_confusion(confusion, label_distribution=label_distribution)


def label_distribution(points: Sequence[LabelPoint], n_classes: int) -> dict:
    """Share of submitted labels per class; sums to 1 for non-empty input."""
    counts = np.zeros(n_classes, dtype=np.int64)
    for p in points:
        counts[p.cls] += 1
    total = max(counts.sum(), 1)
    return {cls: float(counts[cls] / total) for cls in range(n_classes)}


def label_density_surface(points: Sequence[LabelPoint], extent, bandwidth: float):
    """Isotropic Gaussian KDE of label locations on the pixel grid, [H, W].

    Each kernel integrates to 1/N over the plane, so the grid sums to ~1 up
    to boundary truncation.
    """
    points = list(points)
    if not points:
        raise EmptyLabelsError("KDE of an empty point set")
    if bandwidth <= 0:
        raise EmptyLabelsError("bandwidth must be positive")
    h, w = extent
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    surface = np.zeros((h, w), dtype=np.float64)
    norm = 1.0 / (2.0 * np.pi * bandwidth ** 2 * len(points))
    for row, col, _ in points:
        gr = np.exp(-0.5 * ((rows - row) / bandwidth) ** 2)
        gc = np.exp(-0.5 * ((cols - col) / bandwidth) ** 2)
        surface += np.outer(gr, gc)
    return surface * norm
