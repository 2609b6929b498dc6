"""Entropic Gromov-Wasserstein matching of point clouds (square loss)."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.spatial.distance import cdist

from .measures import PointCloud
from .sinkhorn import ConvergenceWarning, sinkhorn


def gw_loss(C1, C2, plan):
    """``sum_ijkl (C1[i,k] - C2[j,l])^2 T[i,j] T[k,l]`` for symmetric C1, C2."""
    p, q = plan.sum(axis=1), plan.sum(axis=0)
    const = (C1**2 @ p)[:, None] + (C2**2 @ q)[None, :]
    return float(((const - 2.0 * C1 @ plan @ C2.T) * plan).sum())


def gromov_wasserstein(
    cloud_a: PointCloud,
    cloud_b: PointCloud,
    epsilon=1e-2,
    outer_iter=50,
    marginal_tol=1e-7,
    max_iter=1000,
    tol=1e-8,
    scale=1.0,
):
    """Match two clouds by their intra-cloud euclidean distances.

    Starting from the product coupling, the quadratic objective is linearized at
    the current plan and the linear problem is solved with :func:`sinkhorn`,
    using the current plan as the entropic reference measure (a KL-proximal
    step of size ``epsilon``), so the iterates approach a coupling of the
    unregularized objective rather than a blurred one. ``max_iter`` caps each
    inner solve, which is warm-started from the previous one.
    Stops when the objective decreases by less than ``tol`` (or increases).
    ``scale`` divides all coordinates first. Returns ``(cost, plan)``.
    """
    C1 = cdist(cloud_a.coords / scale, cloud_a.coords / scale)
    C2 = cdist(cloud_b.coords / scale, cloud_b.coords / scale)
    p, q = cloud_a.masses, cloud_b.masses
    const = (C1**2 @ p)[:, None] + (C2**2 @ q)[None, :]

    plan = np.outer(p, q)
    cost = gw_loss(C1, C2, plan)
    converged = False
    warm = None
    for _ in range(outer_iter):
        grad = 2.0 * (const - 2.0 * C1 @ plan @ C2.T)
        # KL-proximal step: the current plan is the reference measure
        linear = grad - epsilon * np.log(np.maximum(plan, 1e-300))
        sol = sinkhorn(p, q, linear - linear.min(), epsilon, marginal_tol, max_iter, warn=False, init=warm)
        candidate, warm = sol.plan, sol.log_potentials
        new_cost = gw_loss(C1, C2, candidate)
        if new_cost > cost:
            converged = True
            break
        plan, improvement, cost = candidate, cost - new_cost, new_cost
        if improvement < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"gromov_wasserstein did not converge in {outer_iter} outer iterations", ConvergenceWarning)
    return max(cost, 0.0), plan
