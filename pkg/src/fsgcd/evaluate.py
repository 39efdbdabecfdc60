"""Open-set clustering evaluation: k-means, optimal cluster-to-class
assignment, ALL/OLD/NEW accuracies, and the Calinski-Harabasz dispersion
ratio."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateDataError, InfiniteSeparationError, ShapeMismatchError


@dataclass
class ClusteringResult:
    assignment: np.ndarray            # (n,) cluster id per point
    centroids: np.ndarray             # (k, dim)
    inertia: float                    # total within-cluster squared distance
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0


@dataclass
class Metrics:
    acc_all: float
    acc_old: float
    acc_new: float
    ch_index: float
    mapping: list[int]                # cluster id -> class id

    def to_dict(self) -> dict:
        return {
            "acc_all": self.acc_all,
            "acc_old": self.acc_old,
            "acc_new": self.acc_new,
            "ch_index": self.ch_index,
            "mapping": self.mapping,
        }


def _squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # |x - c|^2 expanded; clip guards tiny negatives from cancellation.
    d2 = ((x * x).sum(axis=1)[:, None]
          - 2.0 * x @ centroids.T
          + (centroids * centroids).sum(axis=1)[None, :])
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # k-means++: each next seed drawn with probability proportional to its
    # squared distance from the chosen seeds.
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = _squared_distances(x, centroids[:1]).min(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = x[idx]
        closest = np.minimum(closest, _squared_distances(x, centroids[j:j + 1])[:, 0])
    return centroids


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float) -> ClusteringResult:
    n, k = x.shape[0], centroids.shape[0]
    history: list[float] = []
    assignment = np.zeros(n, dtype=np.int64)
    iteration = 0
    for iteration in range(1, max_iter + 1):
        d2 = _squared_distances(x, centroids)
        assignment = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), assignment].sum()))

        new_centroids = centroids.copy()
        for j in range(k):
            members = assignment == j
            if members.any():
                new_centroids[j] = x[members].mean(axis=0)
        # Re-seed empty clusters to the point farthest from its centroid.
        empty = [j for j in range(k) if not (assignment == j).any()]
        if empty:
            dist_to_own = _squared_distances(x, new_centroids)[np.arange(n), assignment]
            order = np.argsort(-dist_to_own, kind="stable")
            for rank, j in enumerate(empty):
                new_centroids[j] = x[order[rank]]
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < tol:
            break
    d2 = _squared_distances(x, centroids)
    assignment = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), assignment].sum())
    history.append(inertia)
    return ClusteringResult(assignment=assignment, centroids=centroids,
                            inertia=inertia, inertia_history=history,
                            n_iter=iteration)


def kmeans(x: np.ndarray, k: int, seed: int = 0, n_restarts: int = 10,
           max_iter: int = 300, tol: float = 1e-9) -> ClusteringResult:
    """K-means with k-means++ seeding and restart selection by lowest inertia."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise DegenerateDataError("k must be >= 1")
    if k > n:
        raise DegenerateDataError(f"k = {k} exceeds the number of points ({n})")
    best: ClusteringResult | None = None
    children = np.random.SeedSequence(seed).spawn(n_restarts)
    for child in children:
        rng = np.random.Generator(np.random.PCG64(child))
        result = _lloyd(x, _kmeans_pp_init(x, k, rng), max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect matching on a square cost matrix.

    Returns ``(perm, total)`` where ``perm[i]`` is the column assigned to row
    ``i``.  Solved via scipy's linear sum assignment (cubic time); exactness
    is cross-checked against brute force in the test suite.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeMismatchError(f"cost matrix must be square, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise DegenerateDataError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm, float(cost[rows, cols].sum())


def cluster_accuracy(assignment: np.ndarray, truth: np.ndarray,
                     known_classes: np.ndarray, n_classes: int | None = None,
                     n_clusters: int | None = None,
                     allow_mismatch: bool = False) -> tuple[float, float, float, list[int]]:
    """ALL/OLD/NEW accuracy under one globally optimal cluster-to-class map.

    OLD covers samples whose true class is known, NEW the rest; both are
    scored under the same mapping that maximizes overall matches.  When the
    cluster count differs from the class count the contingency matrix is
    zero-padded square, but only if ``allow_mismatch`` is set.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if assignment.shape != truth.shape:
        raise ShapeMismatchError("assignment and truth must cover the same samples")
    if n_clusters is None:
        n_clusters = int(assignment.max()) + 1 if assignment.size else 0
    if n_classes is None:
        n_classes = int(truth.max()) + 1
    if n_clusters != n_classes:
        if not allow_mismatch:
            raise ShapeMismatchError(
                f"{n_clusters} clusters vs {n_classes} classes; "
                "pass allow_mismatch=True to pad"
            )
        warnings.warn("cluster/class count mismatch: padding contingency matrix",
                      stacklevel=2)
    side = max(n_clusters, n_classes)
    contingency = np.zeros((side, side), dtype=np.int64)
    np.add.at(contingency, (assignment, truth), 1)

    perm, _ = hungarian(contingency.max() - contingency)
    mapped = np.asarray(perm)[assignment]
    correct = mapped == truth

    known = np.isin(truth, np.asarray(known_classes, dtype=np.int64))
    acc_all = float(correct.mean()) if truth.size else 0.0
    acc_old = float(correct[known].mean()) if known.any() else 0.0
    acc_new = float(correct[~known].mean()) if (~known).any() else 0.0
    return acc_all, acc_old, acc_new, [int(c) for c in perm]


def ch_index(x: np.ndarray, assignment: np.ndarray) -> float:
    """Calinski-Harabasz dispersion ratio.

    ``[tr(B)/(k-1)] / [tr(W)/(n-k)]`` with between-cluster scatter about the
    global mean and within-cluster scatter about cluster centroids.  Raises
    when the within-cluster trace is exactly zero rather than dividing.
    """
    x = np.asarray(x, dtype=np.float64)
    assignment = np.asarray(assignment, dtype=np.int64)
    if x.shape[0] != assignment.shape[0]:
        raise ShapeMismatchError("one cluster id per point is required")
    n = x.shape[0]
    clusters = np.unique(assignment)
    k = clusters.size
    if k < 2:
        raise DegenerateDataError("dispersion ratio needs at least two clusters")
    if n <= k:
        raise DegenerateDataError(f"needs more points ({n}) than clusters ({k})")
    mean = x.mean(axis=0)
    tr_b = 0.0
    tr_w = 0.0
    for c in clusters:
        members = x[assignment == c]
        centroid = members.mean(axis=0)
        tr_b += members.shape[0] * float(((centroid - mean) ** 2).sum())
        tr_w += float(((members - centroid) ** 2).sum())
    if tr_w == 0.0:
        raise InfiniteSeparationError("all points coincide with their centroids")
    return (tr_b / (k - 1)) / (tr_w / (n - k))
