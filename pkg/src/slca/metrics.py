"""Classification metrics: accuracy and macro one-vs-rest rank AUC."""
from __future__ import annotations

import numpy as np

from .errors import UndefinedMetricError


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax equals the label (ties go to the lowest class)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise UndefinedMetricError("accuracy of an empty batch")
    return float((np.argmax(logits, axis=1) == labels).mean())


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their mean rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    ranks = np.empty(len(x), dtype=np.float64)
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    return ranks


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    r = average_ranks(np.asarray(scores, dtype=np.float64))
    return float((r[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_per_class(scores: np.ndarray, labels: np.ndarray) -> tuple[dict[int, float], list[int]]:
    """Per-class one-vs-rest AUCs and the list of classes skipped for lack of positives or negatives."""
    labels = np.asarray(labels)
    per, skipped = {}, []
    for k in range(scores.shape[1]):
        pos = labels == k
        if pos.all() or not pos.any():
            skipped.append(k)
            continue
        per[k] = binary_auc(scores[:, k], pos)
    return per, skipped


def auc_macro_ovr(scores: np.ndarray, labels: np.ndarray) -> float:
    per, _ = auc_per_class(scores, labels)
    if not per:
        raise UndefinedMetricError("every class lacks positives or negatives")
    return float(np.mean(list(per.values())))
