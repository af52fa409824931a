"""Segmentation quality (per-class IoU, mIoU) and throughput measurement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hdseg.errors import ContractError, NoDataError


class ConfusionMatrix:
    """``counts[g, p]`` = number of points with ground truth ``g`` predicted as ``p``.

    Matrices built on disjoint shards can be summed with ``+``.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ContractError(f"num_classes must be positive, got {num_classes}")
        self.num_classes = int(num_classes)
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, gt: int, pred: int) -> None:
        c = self.num_classes
        if not (0 <= gt < c and 0 <= pred < c):
            raise ContractError(f"class indices ({gt}, {pred}) outside [0, {c})")
        self.counts[gt, pred] += 1

    def accumulate_batch(self, gt: np.ndarray, pred: np.ndarray) -> None:
        """Vectorized ``accumulate``; ignore-sentinel (negative) ground truth is skipped."""
        gt = np.asarray(gt, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if gt.shape != pred.shape:
            raise ContractError(f"gt shape {gt.shape} != pred shape {pred.shape}")
        keep = gt >= 0
        gt, pred = gt[keep], pred[keep]
        c = self.num_classes
        if gt.size and (gt.max() >= c or pred.min() < 0 or pred.max() >= c):
            raise ContractError(f"class index outside [0, {c})")
        self.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out


def iou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where a class has zero union) and their mean over defined classes.

    Raises:
        NoDataError: no class has a nonzero union.
    """
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - np.diag(counts)
    defined = union > 0
    if not defined.any():
        raise NoDataError("confusion matrix is empty")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[defined] = tp[defined] / union[defined]
    return per_class, float(per_class[defined].mean())


@dataclass(frozen=True)
class ThroughputRecord:
    scans: int
    points: int
    wall_time: float
    fps: float


def measure_fps(scan_count: int, point_count: int, wall_time: float) -> ThroughputRecord:
    if not wall_time > 0:
        raise ContractError(f"wall time must be positive, got {wall_time}")
    return ThroughputRecord(scan_count, point_count, wall_time, scan_count / wall_time)
