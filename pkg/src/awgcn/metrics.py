"""Classification metrics: confusion matrix, per-class and macro F1, one-vs-rest AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def precision_recall_f1(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class scores from a confusion matrix; 0/0 counts as 0."""
    tp = np.diag(cm).astype(float)
    pred = cm.sum(axis=0).astype(float)
    true = cm.sum(axis=1).astype(float)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_f1(y_true, y_pred, n_classes: int, present_only: bool = True) -> float:
    """Unweighted mean F1 over classes (only classes seen in truth or prediction when ``present_only``)."""
    cm = confusion_matrix(y_true, y_pred, n_classes)
    _, _, f1 = precision_recall_f1(cm)
    if present_only:
        seen = (cm.sum(axis=0) + cm.sum(axis=1)) > 0
        f1 = f1[seen]
    return float(f1.mean()) if f1.size else 0.0


def binary_auc(scores, positive) -> float | None:
    """Mann-Whitney AUC: P(score_pos > score_neg) + ½ P(tie). None if a side is empty."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def ovr_auc(y_true, scores: np.ndarray) -> tuple[float | None, float | None, list[float | None]]:
    """Macro and support-weighted one-vs-rest AUC plus the per-class values.

    ``scores`` is (n, C) class probabilities, or (n,) / (n, 1) positive-class
    scores for a binary problem, in which case the positive-class AUC is both
    the macro and weighted value.
    """
    y = np.asarray(y_true, dtype=int)
    s = np.asarray(scores, dtype=float)
    if s.ndim == 1 or s.shape[1] == 1:
        auc = binary_auc(s.reshape(-1), y == 1)
        return auc, auc, [auc]
    per_class = [binary_auc(s[:, c], y == c) for c in range(s.shape[1])]
    valid = [(a, int((y == c).sum())) for c, a in enumerate(per_class) if a is not None]
    if not valid:
        return None, None, per_class
    macro = float(np.mean([a for a, _ in valid]))
    support = sum(w for _, w in valid)
    weighted = float(sum(a * w for a, w in valid) / support)
    return macro, weighted, per_class
