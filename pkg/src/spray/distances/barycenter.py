"""Barycenters of grid measures and the corner-interpolation weights used to
lay them out on a square."""

from __future__ import annotations

import numpy as np

from .measures import to_measure
from .sinkhorn import _lse


def _check_weights(weights, count):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (count,):
        raise ValueError(f"need {count} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    return w


def euclidean_barycenter(maps, weights):
    """Weighted pixel-wise average of the normalized measures."""
    measures = [to_measure(m) for m in maps]
    w = _check_weights(weights, len(measures))
    return sum(wi * m for wi, m in zip(w, measures))


class _GridKernel:
    """``log exp(-C/eps)`` applied separably along rows and columns (C is the
    diagonal-normalized squared euclidean pixel cost)."""

    def __init__(self, shape, epsilon):
        h, w = shape
        diag2 = float((h - 1) ** 2 + (w - 1) ** 2) or 1.0
        r, c = np.arange(h), np.arange(w)
        self.log_kr = -((r[:, None] - r[None, :]) ** 2) / (diag2 * epsilon)
        self.log_kc = -((c[:, None] - c[None, :]) ** 2) / (diag2 * epsilon)

    def __call__(self, log_x):
        # columns: t[r, c] = lse_c'(kc[c, c'] + x[r, c'])
        t = _lse(self.log_kc[None, :, :] + log_x[:, None, :], axis=2)
        # rows: out[r, c] = lse_r'(kr[r, r'] + t[r', c])
        return _lse(self.log_kr[:, :, None] + t[None, :, :], axis=1)


def wasserstein_barycenter(maps, weights, epsilon=1e-3, iterations=1000, tol=1e-10):
    """Entropic Wasserstein barycenter on the shared pixel grid.

    Iterative Bregman projections with a separable Gaussian kernel, all in the
    log domain: each input measure gets its own scaling pair, and the
    barycenter is the weighted geometric mean of the current marginals.
    Stops after ``iterations`` sweeps or when the barycenter changes by less
    than ``tol`` in L1. Returns a normalized ``(h, w)`` measure.
    """
    measures = [to_measure(m) for m in maps]
    shape = measures[0].shape
    if any(m.shape != shape for m in measures):
        raise ValueError("maps must share one grid")
    w = _check_weights(weights, len(measures))
    kernel = _GridKernel(shape, epsilon)
    with np.errstate(divide="ignore"):
        log_a = [np.log(m) for m in measures]
    log_v = [np.zeros(shape) for _ in measures]
    active = [i for i in range(len(measures)) if w[i] > 0]
    bary = None
    for _ in range(iterations):
        log_d = {}
        for i in active:
            log_u = log_a[i] - kernel(log_v[i])
            log_d[i] = log_v[i] + kernel(log_u)
        log_b = sum(w[i] * log_d[i] for i in active)
        for i in active:
            log_v[i] = log_v[i] + log_b - log_d[i]
        new = np.exp(log_b - _lse(log_b.ravel(), axis=0))
        if bary is not None and np.abs(new - bary).sum() < tol:
            bary = new
            break
        bary = new
    return bary


def chebyshev_interpolation_weights(position, corners=((0, 0), (1, 0), (0, 1), (1, 1))):
    """Weights ``max(0, 1 - chebyshev(position, corner))`` renormalized to 1."""
    pos = np.asarray(position, dtype=np.float64)
    if pos.shape != (2,) or np.any(pos < 0) or np.any(pos > 1):
        raise ValueError("position must lie in the unit square")
    corners = np.asarray(corners, dtype=np.float64)
    raw = np.maximum(0.0, 1.0 - np.abs(corners - pos).max(axis=1))
    total = raw.sum()
    if total <= 0:
        raise ValueError(f"position {tuple(pos)} is outside the support of every corner")
    return raw / total
