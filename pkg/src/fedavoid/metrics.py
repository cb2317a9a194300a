"""Classifier metrics (accuracy with ROC/AUC) and box-plot summaries."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models, nn
from .data import EnvironmentDataset
from .errors import ConfigError
from .models import ModelParams

THRESHOLD = 0.5


@dataclass
class MetricsReport:
    accuracy: float
    confusion: np.ndarray  # [[TN, FP], [FN, TP]] (rows: true label, cols: predicted)
    roc: list = field(repr=False)  # (fpr, tpr) points
    auc: float
    n: int

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "n": self.n,
            "confusion": self.confusion.tolist(),
        }


def predict_scores(mp: ModelParams, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Softmax probability of *blocked* for each image."""
    params = models.unflatten(mp)
    out = []
    for s in range(0, len(images), batch):
        logits, _ = nn.forward(mp.arch.layers, params, images[s : s + batch])
        out.append(nn.softmax(logits.astype(np.float64))[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def classify(scores, threshold: float = THRESHOLD) -> np.ndarray:
    """Blocked iff score > threshold; a score of exactly 0.5 counts as free."""
    return (np.asarray(scores) > threshold).astype(np.int64)


def confusion(labels, preds) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    c = np.zeros((2, 2), dtype=np.int64)
    np.add.at(c, (labels, preds), 1)
    return c


def _roc_counts(scores, labels):
    """Cumulative (fp, tp) counts at the end of each tie group, plus N and P."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    P = int(labels.sum())
    N = int(len(labels) - P)
    if P == 0 or N == 0:
        raise ConfigError("ROC needs both classes present")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # end of each tie group
    fp = np.r_[0, np.cumsum(1 - y)[last]]
    tp = np.r_[0, np.cumsum(y)[last]]
    return fp, tp, N, P


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """ROC points for every distinct score threshold, from (0, 0) to (1, 1).

    Tied scores move FPR and TPR together, giving one diagonal segment.
    """
    fp, tp, N, P = _roc_counts(scores, labels)
    return fp / N, tp / P


def trapezoid_auc(fpr, tpr) -> float:
    fpr, tpr = np.asarray(fpr, np.float64), np.asarray(tpr, np.float64)
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc(scores, labels) -> float:
    """Trapezoid area under the ROC, summed in integer counts and divided once."""
    fp, tp, N, P = _roc_counts(scores, labels)
    twice_area = sum(int(a) * int(b) for a, b in zip(np.diff(fp), tp[1:] + tp[:-1]))
    return twice_area / (2 * N * P)


def report_from_scores(scores, labels) -> MetricsReport:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ConfigError("cannot evaluate an empty set")
    preds = classify(scores)
    c = confusion(labels, preds)
    acc = float(np.trace(c)) / len(labels)
    if labels.min() == labels.max():
        # single-class sets have no ROC; report the degenerate diagonal
        fpr, tpr = np.array([0.0, 1.0]), np.array([0.0, 1.0])
        a = float("nan")
    else:
        fpr, tpr = roc_curve(scores, labels)
        a = auc(scores, labels)
    return MetricsReport(acc, c, list(zip(fpr.tolist(), tpr.tolist())), a, int(len(labels)))


def evaluate(mp: ModelParams, ds: EnvironmentDataset) -> MetricsReport:
    if len(ds) == 0:
        raise ConfigError("cannot evaluate an empty set")
    if ds.split != "val":
        raise ConfigError("evaluation needs a val split")
    return report_from_scores(predict_scores(mp, ds.images), ds.labels)


@dataclass(frozen=True)
class BoxStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float

    @classmethod
    def of(cls, values) -> "BoxStats":
        """Whiskers at min/max; quartiles by linear interpolation."""
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise ConfigError("no values")
        q = np.percentile(v, [0, 25, 50, 75, 100])
        return cls(*(float(x) for x in q))

    def as_dict(self) -> dict:
        return {"min": self.min, "q1": self.q1, "median": self.median, "q3": self.q3, "max": self.max}
