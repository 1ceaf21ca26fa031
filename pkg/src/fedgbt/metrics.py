"""Binary classification metrics: confusion counts, rates, log-loss, AUC.

Zero-denominator conventions: precision, recall and f1 return 0 when their
denominator is empty. Probabilities are clamped to [1e-15, 1 - 1e-15]
before the log-loss logarithm. ROC-AUC is the exact tie-aware pairwise
probability that a positive outranks a negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import FeatureMatrix
from .gbdt import Ensemble, predict_proba_batch

__all__ = [
    "ConfusionMatrix",
    "MetricsReport",
    "confusion",
    "accuracy",
    "recall",
    "precision",
    "f1",
    "log_loss",
    "roc_auc",
    "evaluate",
]

LOG_LOSS_EPS = 1e-15


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    log_loss: float
    roc_auc: float
    confusion: ConfusionMatrix
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "log_loss": self.log_loss,
            "roc_auc": self.roc_auc,
            "tp": self.confusion.tp,
            "fn": self.confusion.fn,
            "fp": self.confusion.fp,
            "tn": self.confusion.tn,
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        return cls(
            accuracy=obj["accuracy"],
            precision=obj["precision"],
            recall=obj["recall"],
            f1=obj["f1"],
            log_loss=obj["log_loss"],
            roc_auc=obj["roc_auc"],
            confusion=ConfusionMatrix(obj["tp"], obj["fn"], obj["fp"], obj["tn"]),
            sample_count=obj["sample_count"],
        )


def _paired(y_true, other, other_name: str):
    y = np.asarray(y_true)
    o = np.asarray(other, dtype=np.float64)
    if y.shape != o.shape or y.ndim != 1:
        raise ValueError(f"y_true and {other_name} must be equal-length vectors")
    if y.size == 0:
        raise ValueError("empty input")
    return y, o


def confusion(y_true, y_pred) -> ConfusionMatrix:
    y, p = _paired(y_true, y_pred, "y_pred")
    p = p.astype(np.int64)
    return ConfusionMatrix(
        tp=int(np.sum((y == 1) & (p == 1))),
        fn=int(np.sum((y == 1) & (p == 0))),
        fp=int(np.sum((y == 0) & (p == 1))),
        tn=int(np.sum((y == 0) & (p == 0))),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    return (cm.tp + cm.tn) / cm.total


def recall(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fn
    return cm.tp / denom if denom else 0.0


def precision(cm: ConfusionMatrix) -> float:
    denom = cm.tp + cm.fp
    return cm.tp / denom if denom else 0.0


def f1(precision_value: float, recall_value: float) -> float:
    denom = precision_value + recall_value
    return 2.0 * precision_value * recall_value / denom if denom else 0.0


def log_loss(y_true, probabilities) -> float:
    """Negative mean log-likelihood with clamped probabilities."""
    y, p = _paired(y_true, probabilities, "probabilities")
    p = np.clip(p, LOG_LOSS_EPS, 1.0 - LOG_LOSS_EPS)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1.0 - p)))


def roc_auc(y_true, scores) -> float:
    """Probability a random positive outranks a random negative; ties count
    one half (rank formulation, exactly the pairwise definition)."""
    y, s = _paired(y_true, scores, "scores")
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc requires both classes present")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    cumulative = np.cumsum(counts)
    avg_rank = cumulative - (counts - 1) / 2.0
    rank_sum = float(np.sum(avg_rank[inverse][y == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate(model: Ensemble, test: FeatureMatrix) -> MetricsReport:
    """Full report for a model on a test matrix at the 0.5 threshold."""
    probs = predict_proba_batch(model, test.features)
    preds = (probs >= 0.5).astype(np.int64)
    cm = confusion(test.labels, preds)
    p = precision(cm)
    r = recall(cm)
    return MetricsReport(
        accuracy=accuracy(cm),
        precision=p,
        recall=r,
        f1=f1(p, r),
        log_loss=log_loss(test.labels, probs),
        roc_auc=roc_auc(test.labels, probs),
        confusion=cm,
        sample_count=test.n_rows,
    )
