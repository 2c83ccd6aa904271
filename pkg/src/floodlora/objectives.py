"""BCE + Dice training objective and binary segmentation metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, ValidationError
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    epsilon: float = 1e-6
    prob_clamp: float = 1e-7
    dice_reduction: str = "batch"  # or "per_image": mean of per-sample Dice losses

    def __post_init__(self):
        if self.dice_reduction not in ("batch", "per_image"):
            raise ConfigurationError(f"unknown dice_reduction {self.dice_reduction!r}")
        # a zero weight is allowed so either term can be switched off
        if self.lambda_bce < 0 or self.lambda_dice < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.epsilon <= 0 or not 0 < self.prob_clamp < 0.5:
            raise ConfigurationError("epsilon must be > 0 and prob_clamp in (0, 0.5)")


def _check_targets(logits: Tensor, targets) -> np.ndarray:
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} and targets {y.shape} differ in shape")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("targets must be binary (0/1)")
    return y


def bce_loss(logits, targets, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)``, clamped away from 0 and 1."""
    z = T.as_tensor(logits)
    y = _check_targets(z, targets)
    c = cfg.prob_clamp
    p = T.clip(T.sigmoid(z), c, 1.0 - c)
    ll = T.add(T.mul(T.log(p), y), T.mul(T.log(T.sub(1.0, p)), 1.0 - y))
    return T.mul(T.mean(ll), -1.0)


def dice_loss(logits, targets, cfg: LossConfig = LossConfig()) -> Tensor:
    """Soft Dice over the whole batch: ``1 - (2 sum(y p) + eps) / (sum(y^2) + sum(p^2) + eps)``."""
    z = T.as_tensor(logits)
    y = _check_targets(z, targets)
    return dice_loss_from_probs(T.sigmoid(z), y, cfg.epsilon, cfg.dice_reduction)


def dice_loss_from_probs(probs, targets, epsilon: float = 1e-6, reduction: str = "batch") -> Tensor:
    p = T.as_tensor(probs)
    y = np.asarray(targets, dtype=np.float64)
    if reduction == "batch":
        num = T.add(T.mul(T.tsum(T.mul(p, y)), 2.0), epsilon)
        den = T.add(T.tsum(T.square(p)), float((y * y).sum()) + epsilon)
        return T.sub(1.0, T.div(num, den))
    axes = tuple(range(1, p.ndim))
    num = T.add(T.mul(T.tsum(T.mul(p, y), axis=axes), 2.0), epsilon)
    den = T.add(T.tsum(T.square(p), axis=axes), (y * y).sum(axis=axes) + epsilon)
    return T.sub(1.0, T.mean(T.div(num, den)))


def combined_loss(logits, targets, cfg: LossConfig = LossConfig()) -> Tensor:
    z = T.as_tensor(logits)
    terms = []
    if cfg.lambda_bce:
        terms.append(T.mul(bce_loss(z, targets, cfg), cfg.lambda_bce))
    if cfg.lambda_dice:
        terms.append(T.mul(dice_loss(z, targets, cfg), cfg.lambda_dice))
    if not terms:
        raise ConfigurationError("both loss weights are zero")
    return terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


METRIC_KEYS = ("accuracy", "precision", "recall", "f1", "iou", "dice")


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    iou: float
    dice: float
    counts: ConfusionCounts
    degenerate: bool = False

    @classmethod
    def from_counts(cls, c: ConfusionCounts) -> "MetricsReport":
        degenerate = False

        def ratio(num, den):
            nonlocal degenerate
            if den == 0:
                degenerate = True
                return 0.0
            return num / den

        accuracy = ratio(c.tp + c.tn, c.total)
        precision = ratio(c.tp, c.tp + c.fp)
        recall = ratio(c.tp, c.tp + c.fn)
        f1 = ratio(2 * precision * recall, precision + recall)
        iou = ratio(c.tp, c.tp + c.fp + c.fn)
        return cls(accuracy, precision, recall, f1, iou, f1, c, degenerate)

    def to_record(self, percent: bool = True) -> dict:
        """Flat record; ratios as percentages with two decimals by default."""
        rec = {}
        for k in METRIC_KEYS:
            v = getattr(self, k)
            rec[k] = round(100.0 * v, 2) if percent else v
        rec.update(tp=self.counts.tp, fp=self.counts.fp, fn=self.counts.fn, tn=self.counts.tn,
                   degenerate=self.degenerate)
        return rec

    def to_json(self, percent: bool = True) -> str:
        return json.dumps(self.to_record(percent), sort_keys=False)

    def to_csv_row(self, percent: bool = True) -> str:
        rec = self.to_record(percent)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rec), lineterminator="\n")
        w.writeheader()
        w.writerow(rec)
        return buf.getvalue()


def _check_binary(name: str, a: np.ndarray) -> None:
    if not np.all((a == 0) | (a == 1)):
        raise ValidationError(f"{name} must be binary (0/1)")


def confusion_counts(pred_mask, gt_mask) -> ConfusionCounts:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    _check_binary("prediction", pred)
    _check_binary("ground truth", gt)
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def compute_metrics(pred_mask, gt_mask) -> MetricsReport:
    return MetricsReport.from_counts(confusion_counts(pred_mask, gt_mask))


def threshold_logits(logits, threshold: float = 0.5) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (T._sigmoid_np(z) > threshold).astype(np.uint8)


def f1_iou_from_precision_recall(precision: float, recall: float) -> tuple[float, float, float]:
    """(F1, IoU, Dice) implied by a precision/recall pair on binary masks."""
    if precision + recall == 0:
        return 0.0, 0.0, 0.0
    f1 = 2 * precision * recall / (precision + recall)
    iou = f1 / (2.0 - f1)
    return f1, iou, f1
