"""Policy-ranking metrics used to score OPE estimates against ground-truth returns."""
from __future__ import annotations

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric has no value for these inputs (e.g. a constant rank vector)."""


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of the positions they occupy."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(est, truth) -> float:
    """Pearson correlation of the (average) rank vectors."""
    est, truth = np.asarray(est, float), np.asarray(truth, float)
    if est.shape != truth.shape or est.ndim != 1:
        raise ValueError(f"spearman: shapes {est.shape} and {truth.shape} must be equal 1-D")
    if len(est) < 2:
        raise ValueError("spearman needs at least two policies")
    re, rt = average_ranks(est), average_ranks(truth)
    re, rt = re - re.mean(), rt - rt.mean()
    denom = np.sqrt(np.sum(re ** 2) * np.sum(rt ** 2))
    if denom == 0.0:
        raise UndefinedMetricError("rank correlation undefined for constant inputs")
    return float(np.clip(np.sum(re * rt) / denom, -1.0, 1.0))


def regret_at_1(est, truth) -> tuple[float, float]:
    """``(raw, normalised)`` regret of the policy the estimates rank first.

    Ties in ``est`` go to the lowest index; the normalised value divides by the spread
    of true returns and is 0 when they are all equal.
    """
    est, truth = np.asarray(est, float), np.asarray(truth, float)
    if est.shape != truth.shape or len(est) < 1:
        raise ValueError("regret_at_1 needs equal, non-empty inputs")
    raw = float(truth.max() - truth[int(np.argmax(est))])
    spread = float(truth.max() - truth.min())
    return raw, (raw / spread if spread > 0 else 0.0)


def mae_metric(est, truth) -> float:
    est, truth = np.asarray(est, float), np.asarray(truth, float)
    if est.shape != truth.shape or len(est) < 1:
        raise ValueError("mae needs equal, non-empty inputs")
    return float(np.mean(np.abs(est - truth)))
