"""Ranking metrics for imbalanced binary outcomes."""

from __future__ import annotations

import numpy as np


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for the given labels."""


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length ({len(scores)} vs {len(labels)})")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0/1")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores, labels.astype(np.int64)


def _threshold_counts(scores, labels):
    """Cumulative true/false positive counts at each distinct threshold, high to low."""
    order = np.argsort(-scores, kind="mergesort")
    s, lab = scores[order], labels[order]
    # last index of each run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(lab)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def roc_curve(scores, labels):
    """ROC points ``(fpr, tpr, thresholds)``.

    One point per distinct score plus the leading ``(0, 0)`` point, whose
    threshold is ``inf``.
    """
    scores, labels = _check(scores, labels)
    P = int(labels.sum())
    N = len(labels) - P
    if P == 0 or N == 0:
        raise UndefinedMetricError("ROC AUC needs at least one positive and one negative label")
    thr, tp, fp = _threshold_counts(scores, labels)
    fpr = np.r_[0.0, fp / N]
    tpr = np.r_[0.0, tp / P]
    return fpr, tpr, np.r_[np.inf, thr]


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve by the trapezoidal rule (ties score one half)."""
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)


def precision_recall_curve(scores, labels):
    """Precision-recall points ``(precision, recall, thresholds)``.

    Starts at recall 0 with precision 1 (threshold ``inf``), then one point
    per distinct score from high to low.
    """
    scores, labels = _check(scores, labels)
    P = int(labels.sum())
    if P == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive label")
    thr, tp, fp = _threshold_counts(scores, labels)
    precision = np.r_[1.0, tp / (tp + fp)]
    recall = np.r_[0.0, tp / P]
    return precision, recall, np.r_[np.inf, thr]


def pr_auc(scores, labels) -> float:
    """Area under the precision-recall curve as average precision.

    Each recall increment is weighted by the precision at that threshold
    (step-wise), which avoids the optimism of linear PR interpolation.
    Equal scores form one threshold.
    """
    precision, recall, _ = precision_recall_curve(scores, labels)
    return float(np.sum(np.diff(recall) * precision[1:]))


def summarize(scores, labels) -> dict:
    scores, labels = _check(scores, labels)
    return {
        "auc": roc_auc(scores, labels),
        "auprc": pr_auc(scores, labels),
        "n": int(len(labels)),
        "positive_rate": float(labels.mean()) if len(labels) else 0.0,
    }
