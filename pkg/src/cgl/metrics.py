"""Evaluation metrics: weighted F1, top-k recall, AUC, onset-split recall.

All functions take dense numpy arrays (patients x codes, or flat vectors for
the binary task) and are pure. Score ties in top-k selection break toward the
lower code index so rankings are deterministic.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "weighted_f1",
    "binary_f1",
    "recall_at_k",
    "auc",
    "top_k_indices",
    "onset_split_recall",
]


def _validate_pair(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    return scores, labels


def weighted_f1(scores, labels, threshold: float = 0.5) -> float:
    """Support-weighted mean of per-class F1 at the given threshold.

    A class with no true and no predicted positives gets F1 = 0; weights are
    the per-class true-label counts. All labels zero is degenerate.
    """
    scores, labels = _validate_pair(scores, labels)
    if scores.ndim != 2:
        raise ValueError("weighted_f1 expects (patients, classes) matrices")
    pred = scores >= threshold
    truth = labels != 0
    support = truth.sum(axis=0).astype(np.float64)
    total = support.sum()
    if total == 0:
        raise ValueError("weighted_f1 is undefined when no class has positives")
    tp = (pred & truth).sum(axis=0).astype(np.float64)
    fp = (pred & ~truth).sum(axis=0).astype(np.float64)
    fn = (~pred & truth).sum(axis=0).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    return float((f1 * support).sum() / total)


def binary_f1(scores, labels, threshold: float = 0.5) -> float:
    """F1 of the positive class for a binary task."""
    scores, labels = _validate_pair(scores, labels)
    pred = scores >= threshold
    truth = labels != 0
    tp = float((pred & truth).sum())
    fp = float((pred & ~truth).sum())
    fn = float((~pred & truth).sum())
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores; ties break toward lower index."""
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def recall_at_k(scores, labels, k: int) -> float:
    """Mean over patients of |top-k hits| / |positives|.

    Patients without positives are excluded from the mean; if every patient
    lacks positives the metric is degenerate.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    scores, labels = _validate_pair(scores, labels)
    if scores.ndim != 2:
        raise ValueError("recall_at_k expects (patients, classes) matrices")
    values = []
    for row_scores, row_labels in zip(scores, labels):
        positives = np.nonzero(row_labels)[0]
        if positives.size == 0:
            continue
        top = top_k_indices(row_scores, k)
        hits = np.intersect1d(top, positives).size
        values.append(hits / positives.size)
    if not values:
        raise ValueError("recall_at_k is undefined: no patient has positive labels")
    return float(np.mean(values))


def auc(scores, labels) -> float:
    """Area under the ROC curve via midrank statistics.

    Equivalent to the probability that a random positive outranks a random
    negative, with ties counted half.
    """
    scores, labels = _validate_pair(scores, labels)
    scores = scores.reshape(-1)
    truth = labels.reshape(-1) != 0
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def onset_split_recall(scores, labels, occurred, k: int) -> tuple[float, float]:
    """Top-k recall split into previously-occurred vs new-onset positives.

    ``occurred`` flags, per patient and code, whether the code appeared in
    any feature visit. Both parts keep the full positive count as the
    denominator, so for a patient with both groups the parts sum to that
    patient's overall recall. Each part is averaged over the patients whose
    group is non-empty; an empty cohort yields NaN for that part.
    """
    scores, labels = _validate_pair(scores, labels)
    occurred = np.asarray(occurred)
    if occurred.shape != scores.shape:
        raise ValueError(f"occurred shape {occurred.shape} != scores shape {scores.shape}")
    occ_values, new_values = [], []
    for row_scores, row_labels, row_occ in zip(scores, labels, occurred):
        positives = np.nonzero(row_labels)[0]
        if positives.size == 0:
            continue
        top = top_k_indices(row_scores, k)
        occ_set = positives[row_occ[positives] != 0]
        new_set = positives[row_occ[positives] == 0]
        if occ_set.size:
            occ_values.append(np.intersect1d(top, occ_set).size / positives.size)
        if new_set.size:
            new_values.append(np.intersect1d(top, new_set).size / positives.size)
    occ = float(np.mean(occ_values)) if occ_values else float("nan")
    new = float(np.mean(new_values)) if new_values else float("nan")
    return occ, new
