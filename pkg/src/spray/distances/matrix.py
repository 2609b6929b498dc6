"""Pairwise distance matrices over attribution maps and their DST1 file format.

DST1 layout (little-endian)::

    b"DST1" | u32 n | u8 metric_tag | n*n float64 row-major

with metric tags 0 = euclidean, 1 = wasserstein, 2 = gromov_wasserstein.
"""

from __future__ import annotations

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .gromov import gromov_wasserstein
from .measures import METRICS, DistanceMatrix, extract_points
from .sinkhorn import wasserstein_distance

DST_MAGIC = b"DST1"
METRIC_ALIASES = {
    "euclidean": "euclidean",
    "l2": "euclidean",
    "wasserstein": "wasserstein",
    "ot": "wasserstein",
    "gromov_wasserstein": "gromov_wasserstein",
    "gromov": "gromov_wasserstein",
    "gw": "gromov_wasserstein",
}


def canonical_metric(name):
    try:
        return METRIC_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; choose from {sorted(set(METRIC_ALIASES))}") from None


@dataclass(frozen=True)
class DistanceParams:
    sinkhorn_epsilon: float = 1e-2
    sinkhorn_tol: float = 1e-7
    sinkhorn_max_iter: int = 10000
    gw_epsilon: float = 1e-2
    gw_outer_iter: int = 50
    gw_max_iter: int = 1000
    mass_fraction: float = 0.99
    jobs: int = 1


def _stack(maps):
    arrs = [np.asarray(getattr(m, "values", m), dtype=np.float64) for m in maps]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError("all maps must share one shape")
    return np.stack(arrs)


def pairwise_euclidean(maps) -> DistanceMatrix:
    """L2 distances between flattened signed maps."""
    x = _stack(maps)
    return DistanceMatrix(squareform(pdist(x.reshape(len(x), -1))), "euclidean")


def _finish(values, metric):
    values = np.maximum(values, 0.0)
    values = np.triu(values, 1)
    return DistanceMatrix(values + values.T, metric)


def pairwise_distance_matrix(maps, metric="euclidean", params: DistanceParams | None = None) -> DistanceMatrix:
    """Distance matrix under ``metric``.

    Optimal-transport metrics solve the ``n(n-1)/2`` upper-triangle pairs as
    independent tasks (``params.jobs`` worker threads), then mirror, clamp
    negatives and zero the diagonal.
    """
    metric = canonical_metric(metric)
    params = params or DistanceParams()
    x = _stack(maps)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two maps")
    if metric == "euclidean":
        return pairwise_euclidean(x)

    if metric == "wasserstein":

        def solve(i, j):
            return wasserstein_distance(
                x[i], x[j], params.sinkhorn_epsilon, params.sinkhorn_tol, params.sinkhorn_max_iter
            )

    else:
        clouds = [extract_points(m, params.mass_fraction) for m in x]
        # same diagonal normalization as the grid ground cost
        scale = float(np.hypot(*(np.array(x.shape[1:]) - 1))) or 1.0

        def solve(i, j):
            return gromov_wasserstein(
                clouds[i],
                clouds[j],
                params.gw_epsilon,
                params.gw_outer_iter,
                params.sinkhorn_tol,
                params.gw_max_iter,
                scale=scale,
            )[0]

    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    values = np.zeros((n, n))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if params.jobs > 1:
            with ThreadPoolExecutor(max_workers=params.jobs) as pool:
                results = list(pool.map(lambda ij: solve(*ij), pairs))
        else:
            results = [solve(i, j) for i, j in pairs]
    for (i, j), d in zip(pairs, results):
        values[i, j] = d
    return _finish(values, metric)


def write_dst(path, dm: DistanceMatrix):
    with open(path, "wb") as fh:
        fh.write(DST_MAGIC + struct.pack("<IB", dm.n, METRICS.index(dm.metric_tag)))
        fh.write(np.ascontiguousarray(dm.values, dtype="<f8").tobytes())


def read_dst(path) -> DistanceMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != DST_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    n, tag = struct.unpack_from("<IB", raw, 4)
    body = raw[9:]
    if len(body) != 8 * n * n or tag >= len(METRICS):
        raise ValueError(f"{path}: corrupt DST1 payload")
    return DistanceMatrix(np.frombuffer(body, dtype="<f8").reshape(n, n).copy(), METRICS[tag])
