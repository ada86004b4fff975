"""Segmentation accuracy metrics and latency benchmarking.

Accuracy follows the challenge convention: per-image IoU is the mean of
TP/(TP+FP+FN) over the classes present in ground truth or prediction
(classes absent from both are excluded), and mean IoU averages the
per-image values. The final score is mean IoU divided by mean per-image
execution time, i.e. mean IoU times FPS.
"""
from __future__ import annotations

import dataclasses
import time

import numpy as np

from .errors import ContractError, DataError

RESULTS_COLUMNS = ("model", "sparsity", "mode", "miou", "acc", "params", "flops", "fps", "score")
TIMING_COLUMNS = ("fps", "score")  # excluded from determinism guarantees


class ConfusionMatrix:
    """K x K counts; entry (g, p) = pixels of ground-truth class g predicted as p."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        self.counts = (np.zeros((num_classes, num_classes), dtype=np.int64)
                       if counts is None else counts)

    def add(self, pred_mask, gt_mask):
        self.counts += accumulate_confusion(pred_mask, gt_mask, self.num_classes).counts
        return self

    def __add__(self, other):
        if self.num_classes != other.num_classes:
            raise ContractError("cannot add confusion matrices of different K")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def tp(self):
        return np.diag(self.counts)

    def fp(self):
        return self.counts.sum(axis=0) - self.tp()

    def fn(self):
        return self.counts.sum(axis=1) - self.tp()


def accumulate_confusion(pred_mask, gt_mask, num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise DataError(f"{name} mask contains class ids outside [0, {num_classes})")
    idx = gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1).astype(np.int64)
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return ConfusionMatrix(num_classes, counts.reshape(num_classes, num_classes))


def image_iou(pred_mask, gt_mask, num_classes: int) -> float:
    cm = accumulate_confusion(pred_mask, gt_mask, num_classes)
    tp, fp, fn = cm.tp(), cm.fp(), cm.fn()
    denom = tp + fp + fn
    present = denom > 0
    if not present.any():
        raise ContractError("empty masks")
    return float((tp[present] / denom[present]).mean())


def mean_iou(per_image_ious) -> float:
    vals = list(per_image_ious)
    if not vals:
        raise ContractError("mean_iou of zero images")
    return float(np.mean(vals))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.counts.sum()
    if total == 0:
        raise ContractError("pixel_accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / total)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """Dataset-level per-class IoU diagnostic; NaN for absent classes."""
    tp, fp, fn = cm.tp(), cm.fp(), cm.fn()
    denom = (tp + fp + fn).astype(np.float64)
    with np.errstate(invalid="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def score(mean_iou_value: float, mean_execution_time_seconds: float) -> float:
    """Final score: accuracy per latency (equivalently mIoU * FPS)."""
    if mean_execution_time_seconds <= 0:
        raise ContractError(f"execution time must be positive, got {mean_execution_time_seconds}")
    return mean_iou_value / mean_execution_time_seconds


@dataclasses.dataclass
class EvalReport:
    n: int
    per_image_iou: list
    mean_iou: float
    pixel_accuracy: float
    per_class_iou: np.ndarray


@dataclasses.dataclass
class BenchReport:
    warmup_runs: int
    timed_runs: int
    per_run_seconds: list
    mean_time: float          # seconds per image
    std_time: float
    std_defined: bool         # False when timed_runs == 1
    fps: float
    score: float | None = None


def evaluate_masks(pairs, num_classes: int) -> EvalReport:
    """Metric aggregation over (pred_mask, gt_mask) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("evaluate on an empty dataset")
    total = ConfusionMatrix(num_classes)
    ious = []
    for pred, gt in pairs:
        ious.append(image_iou(pred, gt, num_classes))
        total.add(pred, gt)
    return EvalReport(
        n=len(pairs),
        per_image_iou=ious,
        mean_iou=mean_iou(ious),
        pixel_accuracy=pixel_accuracy(total),
        per_class_iou=per_class_iou(total),
    )


def bench_latency(model, dataset, warmup: int = 1, runs: int = 3,
                  eval_report: EvalReport | None = None) -> BenchReport:
    """Wall-clock forward latency per image, warmup excluded.

    One run is a single pass over the dataset with per-image forwards; must
    be called with no concurrent load for meaningful numbers.
    """
    from . import models as M
    from . import tensor as T
    from .tensor import Tensor

    if runs < 1:
        raise ContractError("bench_latency needs runs >= 1")
    images = [Tensor(s.image[None]) for s in dataset]
    with T.no_grad():
        for _ in range(warmup):
            for img in images:
                M.forward_segment(model, img)
        per_run = []
        for _ in range(runs):
            t0 = time.perf_counter()
            for img in images:
                M.forward_segment(model, img)
            per_run.append(time.perf_counter() - t0)
    mean_time = sum(per_run) / (runs * len(images))
    std_defined = runs > 1
    per_image_runs = [t / len(images) for t in per_run]
    std_time = float(np.std(per_image_runs, ddof=1)) if std_defined else 0.0
    fps = 1.0 / mean_time
    report = BenchReport(warmup_runs=warmup, timed_runs=runs, per_run_seconds=per_run,
                         mean_time=mean_time, std_time=std_time, std_defined=std_defined,
                         fps=fps)
    if eval_report is not None:
        report.score = score(eval_report.mean_iou, mean_time)
    return report
