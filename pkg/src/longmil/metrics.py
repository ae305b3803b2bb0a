"""Classification loss and evaluation metrics.

Macro metrics are unweighted means over classes: AUC is the one-vs-rest
Mann-Whitney statistic with half credit for score ties, F1 comes from
argmax predictions with ties broken toward the lower class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, MetricUndefinedError

__all__ = [
    "cross_entropy",
    "macro_auc",
    "per_class_auc",
    "macro_f1",
    "argmax_preds",
    "confusion_counts",
    "EvalReport",
    "evaluate_scores",
]


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy loss and its gradient wrt the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ConfigError(f"logits must be a vector of >= 2 classes, got {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise ConfigError(f"label {label} outside [0, {logits.shape[0]})")
    shifted = logits - logits.max()
    logz = np.log(np.exp(shifted).sum())
    loss = float(logz - shifted[label])
    grad = np.exp(shifted - logz)
    grad[label] -= 1.0
    return loss, grad


def _binary_auc(y: np.ndarray, s: np.ndarray) -> float:
    # Mann-Whitney with average ranks, so ties earn 0.5 credit
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auc(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """One-vs-rest AUC per class; nan where a class lacks pos or neg."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != len(labels):
        raise ConfigError(f"scores must be (n_samples, n_classes), got {scores.shape}")
    out = np.full(scores.shape[1], np.nan)
    for cls in range(scores.shape[1]):
        y = labels == cls
        if 0 < y.sum() < len(y):
            out[cls] = _binary_auc(y, scores[:, cls])
    return out


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    aucs = per_class_auc(scores, labels)
    if np.isnan(aucs).any():
        missing = np.flatnonzero(np.isnan(aucs)).tolist()
        raise MetricUndefinedError(
            f"AUC undefined: classes {missing} lack a positive or a negative"
        )
    return float(aucs.mean())


def argmax_preds(scores: np.ndarray) -> np.ndarray:
    """Row argmax; numpy takes the first maximum, the lower class index."""
    return np.asarray(scores).argmax(axis=1)


def macro_f1(preds: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class F1; empty classes contribute 0."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise MetricUndefinedError("F1 undefined with a single-class split")
    f1s = []
    for cls in range(n_classes):
        tp = int(((preds == cls) & (labels == cls)).sum())
        fp = int(((preds == cls) & (labels != cls)).sum())
        fn = int(((preds != cls) & (labels == cls)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


def confusion_counts(preds: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, t in zip(np.asarray(preds), np.asarray(labels)):
        m[int(t), int(p)] += 1
    return m


@dataclass
class EvalReport:
    split: str
    seed: int
    macro_auc: float
    macro_f1: float
    class_auc: np.ndarray
    confusion: np.ndarray

    def csv_row(self) -> str:
        aucs = ";".join(f"{a:.6f}" for a in self.class_auc)
        return f"{self.split},{self.seed},{self.macro_auc:.6f},{self.macro_f1:.6f},{aucs}"


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, split: str, seed: int) -> EvalReport:
    n_classes = scores.shape[1]
    preds = argmax_preds(scores)
    return EvalReport(
        split=split,
        seed=seed,
        macro_auc=macro_auc(scores, labels),
        macro_f1=macro_f1(preds, labels, n_classes),
        class_auc=per_class_auc(scores, labels),
        confusion=confusion_counts(preds, labels, n_classes),
    )
