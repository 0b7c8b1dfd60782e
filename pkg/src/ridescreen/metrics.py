"""Ranking and classification metrics: AUC, accuracy, top-k% precision."""

import math

import numpy as np

from .errors import ConfigError, DegenerateLabels, MissingData


def _as_arrays(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ConfigError("scores and labels must be equal-length 1-D sequences")
    return scores, labels.astype(np.int64)


def _midranks(sorted_values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged, for an ascending-sorted array."""
    n = len(sorted_values)
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[i : j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC; ties contribute 1/2."""
    scores, labels = _as_arrays(scores, labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = _midranks(scores[order])
    rank_sum_pos = float(np.sum(ranks[labels[order] == 1]))
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def accuracy(scores, labels, boundary: float = 0.5) -> float:
    """Fraction of samples where (score >= boundary) matches the label."""
    scores, labels = _as_arrays(scores, labels)
    if len(scores) == 0:
        raise MissingData("accuracy of an empty set is undefined")
    predicted = (scores >= boundary).astype(np.int64)
    return float(np.mean(predicted == labels))


def top_k_precision(scores, labels, k_percent: float, ids=None) -> float:
    """Positive fraction among the top ceil(k% * N) scores.

    Ties are broken by ascending vehicle id (positional index when ids are
    not supplied) so the selection is deterministic.
    """
    scores, labels = _as_arrays(scores, labels)
    n = len(scores)
    if n == 0:
        raise MissingData("top-k precision of an empty set is undefined")
    if not 0.0 < k_percent <= 100.0:
        raise ConfigError(f"k_percent must be in (0, 100], got {k_percent}")
    if ids is None:
        ids = np.arange(n)
    else:
        ids = np.asarray(ids)
        if len(ids) != n:
            raise ConfigError("ids must align with scores")
    m = math.ceil((k_percent * n) / 100.0)
    order = np.lexsort((ids, -scores))
    top = order[:m]
    return float(np.sum(labels[top] == 1)) / m


def confusion_counts(scores, labels, boundary: float = 0.5) -> dict:
    """tp/fp/tn/fn at the decision boundary (score >= boundary is positive)."""
    scores, labels = _as_arrays(scores, labels)
    predicted = scores >= boundary
    actual = labels == 1
    return {
        "tp": int(np.sum(predicted & actual)),
        "fp": int(np.sum(predicted & ~actual)),
        "tn": int(np.sum(~predicted & ~actual)),
        "fn": int(np.sum(~predicted & actual)),
    }
