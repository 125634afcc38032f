"""Anchor prior estimation by k-means under a shape-IoU distance.

The distance between a box dimension pair and a centroid is 1 minus the IoU
of the two boxes placed on a common center, the convention for anchor
clustering in one-stage detectors.  Centroid updates take the per-cluster
median of widths and of heights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array

from .errors import DataError

# Priors for 416-input detectors, ascending by area, three per scale.
REFERENCE_ANCHORS = np.array([
    (10, 13), (16, 30), (33, 23),
    (30, 61), (62, 45), (59, 119),
    (116, 90), (156, 198), (373, 326),
], dtype=float)


def shape_iou_matrix(dims: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Pairwise co-centered IoU between (n,2) dims and (k,2) anchors."""
    d = dims[:, None, :]
    a = anchors[None, :, :]
    inter = np.minimum(d, a).prod(axis=2)
    return inter / (d.prod(axis=2) + a.prod(axis=2) - inter)


def mean_best_iou(dims, anchors) -> float:
    """Mean over boxes of the best shape-IoU against any anchor."""
    dims = np.asarray(dims, dtype=float).reshape(-1, 2)
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 2)
    if dims.size == 0 or anchors.size == 0:
        raise DataError("mean_best_iou needs non-empty dims and anchors")
    return float(shape_iou_matrix(dims, anchors).max(axis=1).mean())


def _seed_centroids(dims: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding under the 1 - shape-IoU distance."""
    centroids = np.empty((k, 2))
    centroids[0] = dims[rng.integers(len(dims))]
    for i in range(1, k):
        d2 = (1.0 - shape_iou_matrix(dims, centroids[:i]).max(axis=1)) ** 2
        total = d2.sum()
        if total <= 0:
            centroids[i] = dims[rng.integers(len(dims))]
            continue
        centroids[i] = dims[rng.choice(len(dims), p=d2 / total)]
    return centroids


@dataclass(frozen=True)
class KMeansResult:
    anchors: np.ndarray     # (k, 2), sorted ascending by area
    n_iter: int
    inertia: float          # total within-cluster 1 - shape-IoU distance
    inertia_history: tuple[float, ...]


def kmeans_anchors(dims, k: int = 9, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Cluster (w, h) pairs into ``k`` anchors.

    Lloyd iterations assign each box to its highest shape-IoU centroid and
    update centroids with the coordinate-wise median; a median candidate is
    adopted only when it strictly lowers its cluster's summed distance, which
    keeps the total within-cluster distance non-increasing (the plain median
    is not the exact minimizer under this distance).  An emptied cluster is
    re-seeded to the point farthest from all centroids.  The input is sorted
    canonically before seeding, so the result is independent of input order
    given the same seed.  Iteration stops when assignments are stable or
    after ``max_iter`` rounds.
    """
    dims = np.asarray(dims, dtype=float).reshape(-1, 2)
    if np.unique(dims, axis=0).shape[0] < k:
        raise DataError(f"need at least {k} distinct box dimensions, got "
                        f"{np.unique(dims, axis=0).shape[0]}")
    dims = dims[np.lexsort((dims[:, 1], dims[:, 0]))]
    rng = np.random.default_rng(seed)
    centroids = _seed_centroids(dims, k, rng)

    last = np.full(len(dims), -1)
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dist = 1.0 - shape_iou_matrix(dims, centroids)
        nearest = dist.argmin(axis=1)
        history.append(float(dist[np.arange(len(dims)), nearest].sum()))
        if np.array_equal(nearest, last):
            break
        for c in range(k):
            members = dims[nearest == c]
            if len(members):
                cand = np.median(members, axis=0)
                old_cost = (1.0 - shape_iou_matrix(members, centroids[c:c + 1])).sum()
                new_cost = (1.0 - shape_iou_matrix(members, cand[None])).sum()
                if new_cost < old_cost:
                    centroids[c] = cand
            else:
                farthest = dist.min(axis=1).argmax()
                centroids[c] = dims[farthest]
        last = nearest

    order = np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")
    anchors = centroids[order]
    return KMeansResult(anchors=anchors, n_iter=n_iter,
                        inertia=history[-1], inertia_history=tuple(history))


def format_anchors(anchors: np.ndarray) -> str:
    """Nine "w,h" lines, the CLI output convention."""
    return "\n".join(f"{w:g},{h:g}" for w, h in np.asarray(anchors)) + "\n"


class AnchorKMeans(BaseEstimator):
    """Estimator wrapper around :func:`kmeans_anchors`.

    Parameters
    ----------
    n_anchors : number of priors to estimate (three per detection scale).
    max_iter : Lloyd iteration cap.
    random_state : seed for the k-means++ style initialization.
    """

    def __init__(self, n_anchors: int = 9, max_iter: int = 300, random_state: int = 0):
        self.n_anchors = n_anchors
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=self.n_anchors)
        if X.shape[1] != 2:
            raise DataError(f"expected (n, 2) box dimensions, got {X.shape}")
        res = kmeans_anchors(X, k=self.n_anchors, seed=self.random_state,
                             max_iter=self.max_iter)
        self.anchors_ = res.anchors
        self.n_iter_ = res.n_iter
        self.inertia_ = res.inertia
        self.mean_best_iou_ = mean_best_iou(X, res.anchors)
        return self

    def predict(self, X):
        """Index of the nearest anchor (by shape-IoU) for each dimension pair."""
        X = check_array(X)
        return shape_iou_matrix(X, self.anchors_).argmax(axis=1)

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)
