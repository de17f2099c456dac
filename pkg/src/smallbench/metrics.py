"""Evaluation metrics: accuracy, Matthews correlation, Spearman rank correlation."""

from __future__ import annotations

import math

import numpy as np


def _check(a, b, minimum: int = 1) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"expected equal-length vectors, got {a.shape} and {b.shape}")
    if len(a) < minimum:
        raise ValueError(f"need at least {minimum} values, got {len(a)}")
    return a, b


def accuracy(preds, golds) -> float:
    preds, golds = _check(preds, golds)
    return float(np.mean(preds == golds))


def mcc(preds, golds) -> float:
    """Matthews correlation of binary labels; 0 when any marginal count is 0."""
    preds, golds = _check(preds, golds)
    p, g = preds.astype(bool), golds.astype(bool)
    tp = int(np.sum(p & g))
    tn = int(np.sum(~p & ~g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of the positions they occupy."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(x, y) -> float:
    x, y = _check(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), 2)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(xc, xc)), float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    return float(np.dot(xc, yc) / math.sqrt(sxx * syy))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks; 0 if either vector is constant."""
    x, y = _check(x, y, 2)
    return pearson(average_ranks(x), average_ranks(y))
