"""Ranking metrics: area under the ROC curve and average precision.

Both are computed exactly in float64. AUC uses the rank-statistic form
(probability a random positive outranks a random negative, ties counting
half). AP sums precision-at-k weighted by recall increments over the
descending-score ranking, with ties broken by original position.
"""

from __future__ import annotations

import numpy as np


class SingleClassError(ValueError):
    """AUC needs at least one positive and one negative."""


class NoPositivesError(ValueError):
    """Average precision needs at least one positive."""


def auc(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} vs labels {y.shape}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("need both classes to compute AUC")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} vs labels {y.shape}")
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise NoPositivesError("need at least one positive to compute AP")
    order = np.argsort(-s, kind="mergesort")
    hits = 0
    total = 0.0
    for k, idx in enumerate(order, start=1):
        if y[idx] == 1:
            hits += 1
            total += hits / k
    return float(total / n_pos)
