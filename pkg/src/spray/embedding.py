"""Exact t-SNE for projecting spectral embeddings to the plane."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform

EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250


@dataclass
class PlanarEmbedding:
    coords: np.ndarray  # (n, 2)
    kl_divergence: float
    perplexity: float
    seed: int = 0
    checkpoints: list = field(default_factory=list)  # (iteration, kl)


def _row_affinity(d2, beta):
    shifted = d2 - d2.min()
    p = np.exp(-shifted * beta)
    s = p.sum()
    p /= s
    # entropy in nats
    h = float(np.log(s) + beta * (p * shifted).sum())
    return p, h


def conditional_affinities(d2, perplexity, tol=1e-5, max_steps=200):
    """Row-stochastic Gaussian affinities whose entropies match
    ``log(perplexity)``, bandwidths found by bisection on the precision.

    Returns ``(P, entropies)``; the diagonal of ``P`` is zero.
    """
    d2 = np.asarray(d2, dtype=np.float64)
    n = len(d2)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    H = np.zeros(n)
    for i in range(n):
        row = np.delete(d2[i], i)
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(max_steps):
            p, h = _row_affinity(row, beta)
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        P[i, np.arange(n) != i] = p
        H[i] = h
    return P, H


def _kl(P, Q):
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / Q[mask])).sum())


def tsne(phi, perplexity=30.0, seed=0, iters=1000, learning_rate="auto", checkpoint_every=50):
    """Dense t-SNE with early exaggeration, momentum and per-coordinate gains.

    Checkpoints record the KL divergence every ``checkpoint_every`` iterations
    once exaggeration has ended, plus the final value.
    """
    x = np.asarray(phi, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n < 4:
        raise ValueError(f"t-SNE needs at least 4 points, got {n}")
    if not 0 < perplexity < n / 3:
        raise ValueError(f"perplexity {perplexity} infeasible for n={n} (need 0 < perplexity < n/3)")
    cond, _ = conditional_affinities(squareform(pdist(x, "sqeuclidean")), perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P / P.sum(), 1e-12)
    np.fill_diagonal(P, 0.0)

    if learning_rate == "auto":
        learning_rate = max(n / EXAGGERATION / 4.0, 50.0)
    rng = np.random.default_rng(seed)
    Y = 1e-4 * rng.standard_normal((n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    checkpoints = []
    Q = None

    for it in range(1, iters + 1):
        exag = EXAGGERATION if it <= EXAGGERATION_ITERS else 1.0
        momentum = 0.5 if it <= EXAGGERATION_ITERS else 0.8
        num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * (W.sum(1)[:, None] * Y - W @ Y)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        if it >= EXAGGERATION_ITERS and (it % checkpoint_every == 0 or it == iters):
            checkpoints.append((it, _kl(P, Q)))

    num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    Y = Y - Y.mean(axis=0)
    return PlanarEmbedding(Y, max(_kl(P, Q), 0.0), float(perplexity), seed, checkpoints)
