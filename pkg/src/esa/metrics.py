"""Classification and regression metrics on plain numpy arrays."""

from __future__ import annotations

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric carries no signal for this input (e.g. constant targets)."""


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    return np.bincount(y_true * num_classes + y_pred, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def mcc(confusion) -> float:
    """Multiclass Matthews correlation coefficient of a confusion matrix.

    Returns 0 when the denominator vanishes (a constant predictor or label).
    """
    c = np.asarray(confusion, dtype=np.float64)
    s = c.sum()
    if s <= 0:
        raise UndefinedMetricError("MCC needs at least one prediction")
    correct = np.trace(c)
    t = c.sum(axis=1)
    p = c.sum(axis=0)
    num = correct * s - p @ t
    den = np.sqrt((s * s - p @ p) * (s * s - t @ t))
    return 0.0 if den == 0 else float(num / den)


def accuracy(y_true, y_pred) -> float:
    return float(np.mean(np.asarray(y_true) == np.asarray(y_pred)))


def r2(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if targets.size < 2:
        raise UndefinedMetricError("R^2 needs at least two samples")
    ss_tot = np.sum((targets - targets.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedMetricError("R^2 is undefined for constant targets")
    return float(1.0 - np.sum((targets - preds) ** 2) / ss_tot)


def rmse(preds, targets) -> float:
    d = np.asarray(preds, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def mae(preds, targets) -> float:
    d = np.asarray(preds, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return float(np.mean(np.abs(d)))


def average_precision(scores, labels) -> float:
    """AP of one binary label: mean precision at each positive's rank.

    Ties are broken by stable order of the input.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if not labels.any():
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits].mean())


def mean_average_precision(scores, labels) -> float:
    """Macro AP over label columns that contain at least one positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    aps = [
        average_precision(scores[:, k], labels[:, k])
        for k in range(labels.shape[1])
        if labels[:, k].any()
    ]
    if not aps:
        raise UndefinedMetricError("no label column has a positive")
    return float(np.mean(aps))
