"""
Confusion matrices, IoU and the moving/static breakdown.
"""

from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .datatypes import ClassInfo, IoUReport
from .errors import ConsistencyError


class ConfusionMatrix:
    """
    K x K counts, rows ground truth and columns prediction.

    Points whose ground truth is ``ignore_label`` are never counted.
    """

    def __init__(self, num_classes: int, ignore_label: int = 0):
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, predictions: np.ndarray, labels: np.ndarray) -> "ConfusionMatrix":
        """
        Raises:
            ConsistencyError: On a length mismatch or a class id outside 0..K-1.
        """
        predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if predictions.shape != labels.shape:
            raise ConsistencyError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
        for name, values in (("prediction", predictions), ("label", labels)):
            bad = np.flatnonzero((values < 0) | (values >= self.num_classes))
            if bad.size:
                raise ConsistencyError(
                    f"{name} {values[bad[0]]} at index {bad[0]} is outside the {self.num_classes} classes"
                )
        keep = labels != self.ignore_label
        np.add.at(self.counts, (labels[keep], predictions[keep]), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ConsistencyError(f"Cannot merge {other.num_classes}-class matrix into {self.num_classes} classes")
        self.counts += other.counts
        return self


def accumulate(cm: ConfusionMatrix, predictions: np.ndarray, labels: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(predictions, labels)


def merge(matrices: Iterable[ConfusionMatrix]) -> ConfusionMatrix:
    matrices = list(matrices)
    if not matrices:
        raise ConsistencyError("Nothing to merge")
    merged = ConfusionMatrix(matrices[0].num_classes, matrices[0].ignore_label)
    for cm in matrices:
        merged.merge(cm)
    return merged


def iou(cm: ConfusionMatrix) -> Tuple[np.ndarray, Optional[float]]:
    """
    Per-class IoU = TP / (TP + FP + FN) and their mean.

    Classes with a zero denominator, and the ignore class, are NaN and left
    out of the mean; the mean is None when no class is present.
    """
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denominator = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(denominator > 0, tp / denominator, np.nan)
    if 0 <= cm.ignore_label < cm.num_classes:
        per_class[cm.ignore_label] = np.nan
    present = ~np.isnan(per_class)
    return per_class, float(per_class[present].mean()) if present.any() else None


def _group_mean(per_class: np.ndarray, ids: List[int]) -> Optional[float]:
    values = [per_class[i] for i in ids if i < per_class.shape[0] and not np.isnan(per_class[i])]
    return float(np.mean(values)) if values else None


def moving_static_report(cm: ConfusionMatrix, classes: Sequence[ClassInfo]) -> IoUReport:
    """mIoU overall, over static classes and over moving classes."""
    per_class, miou = iou(cm)
    names = {c.id: c.name for c in classes}
    evaluated = [c for c in classes if c.id != cm.ignore_label and c.id < cm.num_classes]
    return IoUReport(
        per_class={names.get(c.id, str(c.id)): None if np.isnan(per_class[c.id]) else float(per_class[c.id]) for c in evaluated},
        miou=miou,
        static_miou=_group_mean(per_class, [c.id for c in evaluated if not c.moving]),
        moving_miou=_group_mean(per_class, [c.id for c in evaluated if c.moving]),
        evaluated_points=cm.total,
    )


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{100.0 * value:6.2f}"


def to_text_table(report: IoUReport) -> str:
    """Aligned plain-text table, IoU in percent, absent classes shown as '-'."""
    width = max([len(name) for name in report.per_class] + [len("moving mIoU")])
    lines = [f"{'class'.ljust(width)}  IoU [%]", "-" * (width + 9)]
    for name, value in report.per_class.items():
        lines.append(f"{name.ljust(width)}  {_fmt(value)}")
    lines.append("-" * (width + 9))
    lines.append(f"{'static mIoU'.ljust(width)}  {_fmt(report.static_miou)}")
    lines.append(f"{'moving mIoU'.ljust(width)}  {_fmt(report.moving_miou)}")
    lines.append(f"{'mIoU'.ljust(width)}  {_fmt(report.miou)}")
    lines.append(f"{'points'.ljust(width)}  {report.evaluated_points}")
    return "\n".join(lines)


def moving_static_accuracy(
    predictions: np.ndarray,
    labels: np.ndarray,
    classes: Sequence[ClassInfo],
    ignore_label: int = 0,
    balanced: bool = False,
) -> Optional[float]:
    """
    Accuracy of the binary moving-vs-static decision implied by the class predictions.

    With ``balanced`` the accuracies over moving and over static points are
    averaged, so a model calling everything static scores 0.5.

    Returns None when every label is ignored.
    """
    moving = np.zeros(max(c.id for c in classes) + 1, dtype=bool)
    for c in classes:
        moving[c.id] = c.moving
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    keep = labels != ignore_label
    if not keep.any():
        return None
    truth = moving[labels[keep]]
    correct = moving[np.clip(predictions[keep], 0, moving.shape[0] - 1)] == truth
    if balanced:
        accuracy = float(np.mean([correct[truth == group].mean() for group in (False, True) if np.any(truth == group)]))
    else:
        accuracy = float(correct.mean())
    logger.debug(f"Moving/static accuracy {accuracy:.4f} over {int(keep.sum())} points")
    return accuracy
