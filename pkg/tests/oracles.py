"""Independent oracles used by the tests.

Everything here deliberately avoids the library's own code paths: finite
differences for gradients, exhaustive enumeration for k-means optima, and
plain scalar arithmetic for the softmax cross-entropy.
"""

from __future__ import annotations

import math
from itertools import combinations, product

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    g = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Componentwise |a - b| / max(1, |a|, |b|), maximised.

    The unit floor makes the comparison absolute for near-zero components,
    where finite differences carry O(1e-10) roundoff regardless of the
    true value.
    """
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def scalar_softmax_cross_entropy(
    weights: list[list[float]], biases: list[float], x: list[float], label: int
) -> float:
    """Hand evaluation of -log softmax(Wx + b)[label] with math.exp/log."""
    logits = [
        sum(w_ij * x_j for w_ij, x_j in zip(row, x)) + b
        for row, b in zip(weights, biases)
    ]
    exps = [math.exp(v) for v in logits]
    return -math.log(exps[label] / sum(exps))


def sse_of_labeling(points: np.ndarray, labels: np.ndarray, k: int) -> float:
    total = 0.0
    for j in range(k):
        members = points[labels == j]
        if len(members):
            centroid = members.mean(axis=0)
            total += float(((members - centroid) ** 2).sum())
    return total


def brute_force_min_sse(points: np.ndarray, k: int) -> float:
    """Exhaustive minimum within-cluster SSE over all partitions into
    exactly k non-empty groups. Only feasible for small n."""
    n = len(points)
    best = math.inf
    for labeling in product(range(k), repeat=n):
        labels = np.asarray(labeling)
        if len(set(labeling)) != k:
            continue
        best = min(best, sse_of_labeling(points, labels, k))
    return best


def all_distinct_seedings(points: np.ndarray, k: int):
    """Every k-subset of distinct points, as initial centroid matrices."""
    distinct = np.unique(points, axis=0)
    for idx in combinations(range(len(distinct)), k):
        yield distinct[list(idx)].copy()
