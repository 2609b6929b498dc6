"""Probability measures derived from attribution maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateMeasureError(ValueError):
    """A map has no positive mass to transport."""


METRICS = ("euclidean", "wasserstein", "gromov_wasserstein")


@dataclass
class DistanceMatrix:
    values: np.ndarray
    metric_tag: str

    def __post_init__(self):
        if self.metric_tag not in METRICS:
            raise ValueError(f"unknown metric {self.metric_tag!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"distance matrix must be square, got {v.shape}")
        self.values = v

    @property
    def n(self):
        return self.values.shape[0]


@dataclass
class PointCloud:
    coords: np.ndarray  # (m, 2) as (row, col)
    masses: np.ndarray  # (m,), sums to 1

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if len(self.coords) == 0 or len(self.coords) != len(self.masses):
            raise ValueError("point cloud needs >= 1 point and one mass per point")
        if np.any(self.masses <= 0) or abs(self.masses.sum() - 1.0) > 1e-9:
            raise ValueError("masses must be positive and sum to 1")

    def __len__(self):
        return len(self.masses)


def _values(amap):
    return np.asarray(getattr(amap, "values", amap), dtype=np.float64)


def to_measure(amap):
    """Positive part of a map, normalized to unit mass."""
    v = _values(amap)
    if not np.all(np.isfinite(v)):
        raise ValueError("map contains non-finite values")
    pos = np.maximum(v, 0.0)
    total = pos.sum()
    if total <= 0:
        raise DegenerateMeasureError("map has no positive mass")
    return pos / total


def grid_coordinates(shape):
    """Pixel-centre coordinates ``(h*w, 2)`` scaled so the grid diagonal has length 1."""
    h, w = shape
    diag = np.hypot(h - 1, w - 1) or 1.0
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1) / diag


def grid_cost(shape):
    """Squared euclidean ground cost between all pixels of a grid (diagonal normalized)."""
    xy = grid_coordinates(shape)
    diff = xy[:, None, :] - xy[None, :, :]
    return (diff**2).sum(axis=-1)


def extract_points(amap, mass_fraction=0.99):
    """Greedy point extraction: take pixels by decreasing value until
    ``mass_fraction`` of the positive mass is covered.

    Ties are broken in row-major order. Coordinates are raw ``(row, col)``
    pixel indices; masses are the kept values renormalized to 1.
    """
    if not 0 < mass_fraction <= 1:
        raise ValueError("mass_fraction must lie in (0, 1]")
    v = np.maximum(_values(amap), 0.0)
    flat = v.ravel()
    total = flat.sum()
    if total <= 0:
        raise DegenerateMeasureError("map has no positive mass")
    order = np.argsort(-flat, kind="stable")
    order = order[flat[order] > 0]
    cum = np.cumsum(flat[order])
    # relative slack absorbs summation round-off (e.g. 99 x 0.01 vs 0.99)
    count = int(np.searchsorted(cum, mass_fraction * total * (1 - 1e-12))) + 1
    keep = order[: min(count, len(order))]
    rows, cols = np.unravel_index(keep, v.shape)
    masses = flat[keep] / flat[keep].sum()
    return PointCloud(np.stack([rows, cols], axis=1).astype(np.float64), masses)
