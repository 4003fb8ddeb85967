"""Task metrics, run records and time-to-target bookkeeping."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

# metric name -> True when larger is better
HIGHER_IS_BETTER = {
    "accuracy": True,
    "f1": True,
    "precision": True,
    "recall": True,
    "balanced_accuracy": True,
    "mae": False,
    "smape": False,
}


@dataclass
class RunRecord:
    sim_time: float
    global_iter: int
    train_loss: float
    test_metric: dict[str, float] = field(default_factory=dict)
    strategy: str = ""
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> RunRecord:
        return cls(**json.loads(line))


def regression_metrics(preds, targets) -> tuple[float, float]:
    """(MAE, SMAPE).  SMAPE uses the mean-of-magnitudes denominator and
    counts 0/0 terms as 0, so it lies in [0, 2]."""
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {y.size} targets")
    if p.size == 0:
        raise ValueError("no predictions")
    err = np.abs(p - y)
    denom = (np.abs(p) + np.abs(y)) / 2
    terms = np.divide(err, denom, out=np.zeros_like(err), where=denom > 0)
    return float(err.mean()), float(terms.mean())


def confusion_matrix(preds, targets, n_classes: int) -> np.ndarray:
    p = np.asarray(preds, dtype=np.int64).ravel()
    y = np.asarray(targets, dtype=np.int64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {y.size} targets")
    if p.size and (min(p.min(), y.min()) < 0 or max(p.max(), y.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def classification_metrics(preds, targets, n_classes: int) -> dict[str, float]:
    """Accuracy plus macro F1 / precision / recall and balanced accuracy.

    Macro averages run over classes present in the targets or the
    predictions; a class with no predicted positives has precision 0.
    Balanced accuracy averages recall over classes present in the targets.
    """
    cm = confusion_matrix(preds, targets, n_classes)
    if cm.sum() == 0:
        raise ValueError("no predictions")
    tp = np.diag(cm).astype(np.float64)
    actual = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    seen = (actual > 0) | (predicted > 0)
    return {
        "accuracy": float(tp.sum() / cm.sum()),
        "f1": float(f1[seen].mean()),
        "precision": float(precision[seen].mean()),
        "recall": float(recall[seen].mean()),
        "balanced_accuracy": float(recall[actual > 0].mean()),
    }


def meets(metric: str, value: float, target: float) -> bool:
    return value >= target if HIGHER_IS_BETTER[metric] else value <= target


def time_to_target(records, target: float, metric: str = "accuracy") -> float | None:
    """First ``sim_time`` whose ``metric`` meets or beats ``target``."""
    for rec in records:
        v = rec.test_metric.get(metric)
        if v is not None and math.isfinite(v) and meets(metric, v, target):
            return rec.sim_time
    return None


def final_metric(records, metric: str) -> float:
    for rec in reversed(records):
        if metric in rec.test_metric:
            return rec.test_metric[metric]
    return float("nan")
