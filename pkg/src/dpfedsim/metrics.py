"""Confusion-matrix classification metrics (accuracy, macro recall, macro F1)."""

from __future__ import annotations

import numpy as np


def accumulate(predictions, labels, num_classes: int) -> np.ndarray:
    """Build a (K, K) int64 confusion matrix, rows = true class, cols = predicted.

    Out-of-range entries are a hard error rather than being dropped.
    """
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise ValueError(
            f"predictions and labels must be equal-length 1-D sequences, "
            f"got shapes {preds.shape} and {labs.shape}"
        )
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    for name, arr in (("prediction", preds), ("label", labs)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labs, preds), 1)
    return cm


def _check_matrix(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if cm.sum() < 1:
        raise ValueError("confusion matrix is empty (no observations)")
    return cm


def accuracy(cm: np.ndarray) -> float:
    cm = _check_matrix(cm)
    return float(np.trace(cm) / cm.sum())


def _per_class(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(recall, precision, f1) per class; classes with zero denominator get 0."""
    diag = np.diag(cm).astype(np.float64)
    row = cm.sum(axis=1).astype(np.float64)
    col = cm.sum(axis=0).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        recall = np.where(row > 0, diag / np.where(row > 0, row, 1), 0.0)
        precision = np.where(col > 0, diag / np.where(col > 0, col, 1), 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2 * precision * recall / np.where(pr > 0, pr, 1), 0.0)
    return recall, precision, f1


def macro_recall(cm: np.ndarray) -> float:
    """Mean per-class recall over classes that actually occur in the truth."""
    cm = _check_matrix(cm)
    present = cm.sum(axis=1) > 0
    recall, _, _ = _per_class(cm)
    return float(recall[present].mean())


def macro_f1(cm: np.ndarray) -> float:
    """Mean per-class F1 over classes present in the truth.

    Per-class F1 is the harmonic mean of precision and recall, taken as 0
    when both are 0.
    """
    cm = _check_matrix(cm)
    present = cm.sum(axis=1) > 0
    _, _, f1 = _per_class(cm)
    return float(f1[present].mean())
