"""Accuracy, ROC AUC (ties count one half) and average precision."""
from __future__ import annotations

import numpy as np


def _binary(labels, scores):
    y = np.asarray(labels).astype(bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError("labels and scores must have the same length")
    return y, s


def _average_ranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    # group boundaries of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + 1 + b) / 2.0
    return ranks


def roc_auc(labels, scores) -> float | None:
    """P(score of random positive > random negative) + half the tie mass.

    None when either class is absent.
    """
    y, s = _binary(labels, scores)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    r = _average_ranks(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(labels, scores) -> float | None:
    """Sum over distinct thresholds of (recall increment) x precision."""
    y, s = _binary(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        return None
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(y_sorted)[last]
    seen = last + 1
    gain = np.diff(np.r_[0, tp])
    return float(np.sum(gain * (tp / seen)) / n_pos)


def accuracy(labels, probs) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    return float(np.mean(probs.argmax(axis=-1) == labels))


def macro_ovr(metric, labels, probs) -> float | None:
    """One-vs-rest macro average; None if any class makes ``metric`` undefined."""
    labels = np.asarray(labels)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[1] == 2:
        return metric(labels == 1, probs[:, 1])
    vals = [metric(labels == k, probs[:, k]) for k in range(probs.shape[1])]
    if any(v is None for v in vals):
        return None
    return float(np.mean(vals))
