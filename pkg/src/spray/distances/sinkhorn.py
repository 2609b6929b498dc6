"""Log-domain Sinkhorn solver and the grid Wasserstein distance between maps."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .measures import DegenerateMeasureError, grid_cost, to_measure


class ConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class TransportPlan:
    plan: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    cost: float
    iterations_used: int
    converged: bool = True
    log_potentials: tuple | None = None  # (f, g) / epsilon on the supports

    def marginal_violation(self):
        return max(
            np.abs(self.plan.sum(axis=1) - self.mu).max(),
            np.abs(self.plan.sum(axis=0) - self.nu).max(),
        )


def _lse(a, axis):
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.exp(a - m).sum(axis=axis))


def sinkhorn(mu, nu, cost_matrix, epsilon=1e-2, marginal_tol=1e-7, max_iter=10000, warn=True, init=None):
    """Entropic OT plan ``diag(u) exp(-C/eps) diag(v)`` by alternating scaling.

    Potentials are kept in the log domain. Zero-mass entries of ``mu``/``nu``
    are removed before iterating and get zero rows/columns in the plan.
    Iteration stops once the row marginal error (the columns are exact after
    each update) drops below ``marginal_tol``; hitting ``max_iter`` sets
    ``converged=False`` and emits a :class:`ConvergenceWarning`. ``init`` takes
    the ``log_potentials`` of an earlier solve on the same supports (warm start).
    """
    mu = np.asarray(mu, dtype=np.float64).ravel()
    nu = np.asarray(nu, dtype=np.float64).ravel()
    C = np.asarray(cost_matrix, dtype=np.float64)
    if C.shape != (len(mu), len(nu)):
        raise ValueError(f"cost shape {C.shape} does not match marginals ({len(mu)}, {len(nu)})")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if np.any(mu < 0) or np.any(nu < 0):
        raise ValueError("marginals must be non-negative")
    if mu.sum() <= 0 or nu.sum() <= 0:
        raise DegenerateMeasureError("zero-mass marginal")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix must be finite")

    rows, cols = np.flatnonzero(mu > 0), np.flatnonzero(nu > 0)
    a, b = mu[rows], nu[cols]
    Cs = C[np.ix_(rows, cols)]
    log_a, log_b = np.log(a), np.log(b)
    neg = -Cs / epsilon
    f = np.zeros(len(a))  # potentials divided by epsilon
    g = np.zeros(len(b)) if init is None else np.array(init[1], dtype=np.float64)

    converged = False
    it = 0
    row_lse = _lse(neg + g[None, :], axis=1)
    while it < max_iter:
        f = log_a - row_lse
        g = log_b - _lse(neg + f[:, None], axis=0)
        it += 1
        row_lse = _lse(neg + g[None, :], axis=1)
        if np.abs(np.exp(f + row_lse) - a).max() < marginal_tol:
            converged = True
            break

    sub = np.exp(neg + f[:, None] + g[None, :])
    plan = np.zeros(C.shape)
    plan[np.ix_(rows, cols)] = sub
    if not converged and warn:
        warnings.warn(f"sinkhorn did not reach marginal_tol={marginal_tol} in {max_iter} iterations", ConvergenceWarning)
    return TransportPlan(plan, mu, nu, float((sub * Cs).sum()), it, converged, (f, g))


def wasserstein_distance(map_a, map_b, epsilon=1e-2, marginal_tol=1e-7, max_iter=10000):
    """Entropic transport cost between the positive parts of two same-shape maps.

    The ground cost is the squared euclidean pixel distance with the grid
    diagonal scaled to length 1.
    """
    a, b = to_measure(map_a), to_measure(map_b)
    if a.shape != b.shape:
        raise ValueError(f"maps differ in shape: {a.shape} vs {b.shape}")
    plan = sinkhorn(a.ravel(), b.ravel(), grid_cost(a.shape), epsilon, marginal_tol, max_iter)
    return max(plan.cost, 0.0)
