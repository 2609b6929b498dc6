"""k-means on spectral embeddings and the Fisher separability score tau.

Ranking CSV layout: ``class_id,tau,score_k2,...,score_kK`` with one row per
class in ranked order.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int
    inertia: float
    seed: int = 0

    def sizes(self):
        return np.bincount(self.labels, minlength=self.k)


@dataclass
class SeparabilityReport:
    class_id: int
    per_k_scores: dict = field(default_factory=dict)

    @property
    def tau(self):
        if not self.per_k_scores:
            return 0.0
        return float(np.mean(list(self.per_k_scores.values())))


# --------------------------------------------------------------------------- k-means


def _sq_dists(x, centers):
    d = (x**2).sum(1)[:, None] - 2.0 * x @ centers.T + (centers**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plus_plus(x, k, rng):
    n = len(x)
    centers = [int(rng.integers(n))]
    closest = ((x - x[centers[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with a center
            idx = int(rng.choice(np.setdiff1d(np.arange(n), centers)))
        centers.append(idx)
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return x[centers].copy()


def _repair_empty(x, labels, centers, k):
    # move the point farthest from its centroid (within a cluster of size > 1)
    for _ in range(k):
        sizes = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if not len(empty):
            break
        dist = ((x - centers[labels]) ** 2).sum(1)
        dist[sizes[labels] <= 1] = -np.inf
        far = int(np.argmax(dist))
        labels[far] = empty[0]
        centers[empty[0]] = x[far]
    return labels


def _centroids(x, labels, k):
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    return sums / np.bincount(labels, minlength=k)[:, None]


def _lloyd(x, k, rng, max_iter):
    centers = _plus_plus(x, k, rng)
    labels = np.argmin(_sq_dists(x, centers), axis=1)
    labels = _repair_empty(x, labels, centers, k)
    for _ in range(max_iter):
        centers = _centroids(x, labels, k)
        new = np.argmin(_sq_dists(x, centers), axis=1)
        new = _repair_empty(x, new, centers, k)
        if np.array_equal(new, labels):
            break
        labels = new
    centers = _centroids(x, labels, k)
    return labels, float(((x - centers[labels]) ** 2).sum())


def kmeans(phi, k, seed=0, max_iter=300, restarts=5) -> ClusterAssignment:
    """k-means++ seeded Lloyd iterations, best of ``restarts`` by inertia."""
    x = np.asarray(phi, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if not 2 <= k <= n:
        raise ValueError(f"k must satisfy 2 <= k <= n (k={k}, n={n})")
    if restarts < 1 or max_iter < 1:
        raise ValueError("restarts and max_iter must be positive")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        labels, inertia = _lloyd(x, k, rng, max_iter)
        if best is None or inertia < best[1]:
            best = (labels, inertia)
    return ClusterAssignment(best[0].astype(np.int64), k, best[1], seed)


# --------------------------------------------------------------------------- FDA


def scatter_matrices(points, labels):
    """Within-cluster scatter and the (unweighted) between-cluster scatter of
    the cluster means around the grand sample mean."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ValueError("need at least two clusters")
    mu = x.mean(axis=0)
    p = x.shape[1]
    S_w = np.zeros((p, p))
    S_b = np.zeros((p, p))
    for c in ids:
        xc = x[labels == c]
        mc = xc.mean(axis=0)
        centered = xc - mc
        S_w += centered.T @ centered
        S_b += np.outer(mc - mu, mc - mu)
    return (S_w + S_w.T) * 0.5, (S_b + S_b.T) * 0.5


def default_ridge(S_w):
    return max(1e-6 * float(np.trace(S_w)) / S_w.shape[0], 1e-12)


def separability(points, labels, ridge=None):
    """Largest generalized eigenvalue of ``S_b v = lam (S_w + ridge I) v``.

    ``ridge=None`` uses ``1e-6 * trace(S_w) / q`` (at least 1e-12).
    """
    S_w, S_b = scatter_matrices(points, labels)
    ridge = default_ridge(S_w) if ridge is None else float(ridge)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    try:
        chol = np.linalg.cholesky(S_w + ridge * np.eye(len(S_w)))
    except np.linalg.LinAlgError:
        raise FloatingPointError("within-cluster scatter is singular; use ridge > 0") from None
    # whiten: M = L^-1 S_b L^-T
    tmp = np.linalg.solve(chol, S_b)
    M = np.linalg.solve(chol, tmp.T)
    score = float(np.linalg.eigvalsh((M + M.T) * 0.5)[-1])
    if not np.isfinite(score):
        raise FloatingPointError("non-finite separability score")
    return max(score, 0.0)


def tau_score(phi, k_min=2, k_max=30, seed=0, ridge=None, class_id=0, restarts=5, max_iter=300):
    """Separability averaged over k-means clusterings with ``k`` in
    ``[k_min, k_max]``."""
    x = np.asarray(phi, dtype=np.float64)
    n = len(x)
    if n <= k_max:
        warnings.warn(f"k_max={k_max} clamped to n-1={n - 1}", RuntimeWarning)
        k_max = n - 1
    if not 2 <= k_min <= k_max:
        raise ValueError(f"empty k range [{k_min}, {k_max}] for n={n}")
    scores = {}
    for k in range(k_min, k_max + 1):
        assignment = kmeans(x, k, seed, max_iter, restarts)
        scores[k] = separability(x, assignment.labels, ridge)
    return SeparabilityReport(class_id, scores)


def rank_classes(reports):
    """Descending tau, ties broken by ascending class id."""
    return sorted(reports, key=lambda r: (-r.tau, r.class_id))


# --------------------------------------------------------------------------- io


def write_ranking_csv(path, reports):
    ranked = rank_classes(reports)
    ks = sorted(ranked[0].per_k_scores) if ranked else []
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["class_id", "tau"] + [f"score_k{k}" for k in ks])
        for r in ranked:
            if sorted(r.per_k_scores) != ks:
                raise ValueError("reports cover different k ranges")
            out.writerow([r.class_id, repr(r.tau)] + [repr(float(r.per_k_scores[k])) for k in ks])


def read_ranking_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ks = [int(h[len("score_k") :]) for h in rows[0][2:]]
    return [SeparabilityReport(int(row[0]), {k: float(v) for k, v in zip(ks, row[2:])}) for row in rows[1:]]
