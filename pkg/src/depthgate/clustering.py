"""K-means over calibration embeddings.

Plain Lloyd iteration with k-means++ seeding, run in float64. The fit
stops at an assignment fixpoint or after a hard iteration cap, and the
recorded inertia sequence is non-increasing: reassignment can only lower
each point's distance, the mean minimizes within-cluster squared error,
and an empty-cluster reseed only adds a candidate centroid.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

MAX_ITER = 300


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def n_clusters(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


def _sq_dists(x, c):
    """Pairwise squared Euclidean distances, (M, N) for (M, d) and (N, d)."""
    xx = np.sum(x * x, axis=1)[:, None]
    cc = np.sum(c * c, axis=1)[None, :]
    return np.maximum(xx + cc - 2.0 * (x @ c.T), 0.0)


def _plus_plus_init(x, n_clusters, rng):
    m = x.shape[0]
    centers = np.empty((n_clusters, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(m)]
    d2 = _sq_dists(x, centers[:1]).ravel()
    for k in range(1, n_clusters):
        total = d2.sum()
        if total > 0.0:
            idx = rng.choice(m, p=d2 / total)
        else:
            # All remaining distances zero (duplicate inputs): any point do.
            idx = rng.integers(m)
        centers[k] = x[idx]
        d2 = np.minimum(d2, _sq_dists(x, centers[k:k + 1]).ravel())
    return centers


def _update_centroids(x, labels, n_clusters, old_centers):
    """Cluster means, with empty clusters reseeded from the farthest points."""
    centers = old_centers.copy()
    for k in range(n_clusters):
        members = labels == k
        if members.any():
            centers[k] = x[members].mean(axis=0)
    empties = [k for k in range(n_clusters) if not (labels == k).any()]
    if empties:
        d2 = _sq_dists(x, centers).min(axis=1)
        order = np.argsort(-d2, kind="stable")
        for slot, k in enumerate(empties):
            centers[k] = x[order[slot % x.shape[0]]]
    return centers


def kmeans_fit(embeddings, n_clusters, seed=0, max_iter=MAX_ITER, n_init=8):
    """Best of `n_init` restarts by final inertia; ties keep the first."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError("embeddings must be a non-empty (M, d) array")
    if not np.all(np.isfinite(x)):
        raise ConfigError("embeddings contain non-finite values")
    if n_clusters < 1:
        raise ConfigError("n_clusters must be >= 1, got %d" % n_clusters)
    if n_clusters > x.shape[0]:
        raise ConfigError("n_clusters=%d exceeds dataset size %d"
                          % (n_clusters, x.shape[0]))
    if n_init < 1:
        raise ConfigError("n_init must be >= 1, got %d" % n_init)
    best = None
    for restart in range(n_init):
        rng = np.random.default_rng(np.random.SeedSequence([seed, restart]))
        fit = _lloyd(x, n_clusters, rng, max_iter)
        if best is None or fit.inertia < best.inertia:
            best = fit
    return best


def _lloyd(x, n_clusters, rng, max_iter):
    centers = _plus_plus_init(x, n_clusters, rng)
    history = []
    labels = None
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new_labels = d.argmin(axis=1)
        history.append(float(d[np.arange(x.shape[0]), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
        centers = _update_centroids(x, labels, n_clusters, centers)
    else:
        # Iteration cap hit after a centroid update: refresh the assignment
        # so the stored labels describe the returned centroids.
        d = _sq_dists(x, centers)
        labels = d.argmin(axis=1)
        history.append(float(d[np.arange(x.shape[0]), labels].sum()))

    return ClusterModel(centroids=centers,
                        assignments=labels.astype(np.int64),
                        inertia=history[-1],
                        inertia_history=history,
                        n_iter=len(history))


def assign(model, e):
    """Index of the nearest centroid; ties resolve to the lowest index."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (model.dim,):
        raise ContractError("embedding has shape %s, expected (%d,)"
                            % (e.shape, model.dim))
    d2 = np.sum((model.centroids - e) ** 2, axis=1)
    return int(d2.argmin())
