"""Accuracy and statistical-independence measures."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import digamma
from scipy.stats import rankdata

from .errors import ContractViolation

MI_LOG_FLOOR = -0.1


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(len(x), -1)


def _double_centered(d: np.ndarray) -> np.ndarray:
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def dcor2(x, y) -> float:
    """Squared distance correlation (V-statistic) between samples ``x`` and ``y``.

    Either distance variance being zero gives 0.  Rows are samples; 1-D
    inputs are treated as a single column.
    """
    x, y = _as_2d(x), _as_2d(y)
    n = len(x)
    if n != len(y):
        raise ContractViolation(f"dcor2: {n} and {len(y)} samples")
    if n < 4:
        raise ContractViolation("dcor2 needs at least 4 samples")
    a = _double_centered(cdist(x, x))
    b = _double_centered(cdist(y, y))
    dcov = float(np.mean(a * b))
    var_x = float(np.mean(a * a))
    var_y = float(np.mean(b * b))
    if var_x <= 0.0 or var_y <= 0.0:
        return 0.0
    return float(np.clip(dcov / np.sqrt(var_x * var_y), 0.0, 1.0))


def mutual_info_knn(x, y, k: int = 3) -> float:
    """Kraskov-Stoegbauer-Grassberger (algorithm 1) MI estimate in nats.

    Max-norm in the joint space.  Can come out slightly negative when the
    variables are independent.
    """
    x, y = _as_2d(x), _as_2d(y)
    n = len(x)
    if n != len(y):
        raise ContractViolation(f"mutual_info_knn: {n} and {len(y)} samples")
    if n <= k + 1:
        raise ContractViolation(f"mutual_info_knn needs more than k+1={k + 1} samples")
    dx = cdist(x, x, "chebyshev")
    dy = cdist(y, y, "chebyshev")
    dz = np.maximum(dx, dy)
    np.fill_diagonal(dz, np.inf)
    # distance to the k-th neighbour; which of several tied neighbours is k-th
    # does not change the distance
    eps = np.partition(dz, k - 1, axis=1)[:, k - 1]
    nx = (dx < eps[:, None]).sum(axis=1) - 1
    ny = (dy < eps[:, None]).sum(axis=1) - 1
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))


def balanced_accuracy(pred, labels) -> float:
    """Mean per-class recall over the classes present in ``labels``."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    recalls = [np.mean(pred[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(recalls))


def auc_score(scores, labels) -> Optional[float]:
    """Rank-statistic AUC with midranks for ties; None if one class is absent."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def classification_report(pred_prob, labels) -> tuple[float, float, Optional[float]]:
    """(bAcc, F1, AUC) for binary labels and positive-class probabilities.

    A sample is predicted positive when its probability exceeds 0.5; exactly
    0.5 goes to class 0.
    """
    p = np.asarray(pred_prob, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if p.shape != y.shape:
        raise ContractViolation(f"{p.shape} probabilities for {y.shape} labels")
    if np.any((p < 0) | (p > 1)):
        raise ContractViolation("probabilities must lie in [0, 1]")
    pred = (p > 0.5).astype(int)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    return balanced_accuracy(pred, y), float(f1), auc_score(p, y)


@dataclass
class EOResult:
    avg_gap: float
    max_gap: float
    tpr: dict[int, float] = field(default_factory=dict)
    excluded: list[int] = field(default_factory=list)


def equality_of_opportunity(preds, labels, groups) -> EOResult:
    """True-positive-rate gaps over unordered pairs of groups.

    Groups without positive samples are left out and listed in ``excluded``.
    """
    preds, labels, groups = np.asarray(preds), np.asarray(labels), np.asarray(groups)
    tpr: dict[int, float] = {}
    excluded = []
    for g in np.unique(groups):
        pos = (groups == g) & (labels == 1)
        if not pos.any():
            excluded.append(int(g))
            continue
        tpr[int(g)] = float(np.mean(preds[pos] == 1))
    if len(tpr) < 2:
        raise ContractViolation("equality_of_opportunity needs >= 2 groups with positive samples")
    gaps = [abs(tpr[i] - tpr[j]) for i, j in combinations(sorted(tpr), 2)]
    return EOResult(float(np.mean(gaps)), float(np.max(gaps)), tpr, excluded)


def covariance(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ContractViolation("covariance needs two 1-D samples of equal length >= 2")
    return float(np.mean((a - a.mean()) * (b - b.mean())))


def quantize_protected(b, n_bins: int) -> np.ndarray:
    """Equal-frequency bin index per sample.

    Samples are ranked (stable), split into ``n_bins`` runs of near-equal
    length, and tied values all take the lowest bin any of them landed in.
    """
    b = np.asarray(b, dtype=np.float64)
    if n_bins < 2:
        raise ContractViolation("n_bins must be >= 2")
    values, inverse = np.unique(b, return_inverse=True)
    if len(values) < n_bins:
        raise ContractViolation(f"{len(values)} distinct values cannot fill {n_bins} bins")
    order = np.argsort(b, kind="stable")
    bins = np.empty(len(b), dtype=int)
    bins[order] = (np.arange(len(b)) * n_bins) // len(b)
    lowest = np.full(len(values), n_bins, dtype=int)
    np.minimum.at(lowest, inverse, bins)
    return lowest[inverse]


@dataclass
class MetricReport:
    bacc: float
    f1: float
    auc: Optional[float]
    dcor2: list[float]
    mi: list[float]
    eo_avg: Optional[float] = None
    eo_max: Optional[float] = None
    eo_excluded: list[int] = field(default_factory=list)


def metric_report(
    prob_pos, labels, features, protected, eo_bins: int = 4, mi_k: int = 3
) -> MetricReport:
    """Full evaluation battery; ``protected`` is [N, k]."""
    protected = _as_2d(protected)
    bacc, f1, auc = classification_report(prob_pos, labels)
    dc = [dcor2(features, protected[:, j]) for j in range(protected.shape[1])]
    mi = [mutual_info_knn(features, protected[:, j], k=mi_k) for j in range(protected.shape[1])]
    pred = (np.asarray(prob_pos) > 0.5).astype(int)
    groups = quantize_protected(protected[:, 0], eo_bins)
    eo = equality_of_opportunity(pred, labels, groups)
    return MetricReport(bacc, f1, auc, dc, mi, eo.avg_gap, eo.max_gap, eo.excluded)
