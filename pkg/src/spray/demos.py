"""Two small self-contained demonstrations.

``toy_clustering``: spectral clustering of four Gaussian blobs, showing four
near-zero Laplacian eigenvalues followed by a gap.

``glyph_barycenters``: a grid of barycenters between four glyphs placed at the
corners of the unit square, once with the pixel-wise (euclidean) average and
once with the entropic Wasserstein barycenter.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .clustering import kmeans
from .distances import (
    chebyshev_interpolation_weights,
    euclidean_barycenter,
    pairwise_euclidean,
    wasserstein_barycenter,
)
from .report import svg_scatter
from .spectral import eigengap_estimate, knn_affinity, spectral_embedding


@dataclass
class ToyResult:
    points: np.ndarray
    truth: np.ndarray
    eigenvalues: np.ndarray
    k: int
    labels: np.ndarray


def four_blobs(points_per_blob=100, sigma=0.05, seed=0):
    """Blobs centred on the corners of the unit square."""
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    pts = np.concatenate([c + sigma * rng.standard_normal((points_per_blob, 2)) for c in centers])
    return pts, np.repeat(np.arange(4), points_per_blob)


def toy_clustering(points_per_blob=100, sigma=0.05, knn_k=10, q=32, seed=0, max_k=10):
    pts, truth = four_blobs(points_per_blob, sigma, seed)
    emb = spectral_embedding(knn_affinity(pairwise_euclidean(pts[:, None, :]), knn_k), q, seed=seed)
    k = eigengap_estimate(emb.eigenvalues, max_k)
    labels = kmeans(emb.phi[:, :k], k, seed=seed).labels
    return ToyResult(pts, truth, emb.eigenvalues, k, labels)


def write_toy(result: ToyResult, out_dir, reproducible=False):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eig = out / "eigenvalues.csv"
    with open(eig, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "eigenvalue"])
        w.writerows([i + 1, repr(float(v))] for i, v in enumerate(result.eigenvalues))
    pts = out / "points.csv"
    with open(pts, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "x", "y", "blob", "cluster"])
        w.writerows([i, repr(float(x)), repr(float(y)), int(b), int(c)]
                    for i, ((x, y), b, c) in enumerate(zip(result.points, result.truth, result.labels)))
    svg = out / "clusters.svg"
    svg.write_text(svg_scatter(result.points, result.labels, f"{result.k} clusters", reproducible))
    return [eig, pts, svg]


# --------------------------------------------------------------------------- glyphs


def _glyph(kind, size):
    img = np.zeros((size, size))
    s = size
    a, b = s // 4, s - s // 4
    t = max(1, s // 10)
    if kind == "L":
        img[a:b, a : a + t] = 1
        img[b - t : b, a:b] = 1
    elif kind == "T":
        img[a : a + t, a:b] = 1
        img[a:b, s // 2 - t // 2 : s // 2 - t // 2 + t] = 1
    elif kind == "O":
        yy, xx = np.mgrid[:s, :s] + 0.5
        r = np.hypot(yy - s / 2, xx - s / 2)
        img[(r <= s / 4) & (r >= s / 4 - t)] = 1
    elif kind == "V":
        for i in range(a, b):
            off = (i - a) * (b - a) // (2 * (b - a))
            img[i, a + off : a + off + t] = 1
            img[i, b - off - t : b - off] = 1
    else:
        raise ValueError(kind)
    return img


def glyph_corners(size=24, seed=0):
    """Four distinct glyphs, each randomly rotated and translated."""
    rng = np.random.default_rng(seed)
    out = []
    for kind in ("L", "T", "O", "V"):
        img = ndimage.rotate(_glyph(kind, size), rng.uniform(-30, 30), reshape=False, order=1)
        img = ndimage.shift(img, rng.integers(-3, 4, size=2), order=0)
        img = np.clip(img, 0, None) + 1e-6  # no empty pixels: keeps the measures strictly positive
        out.append(img)
    return out


def glyph_barycenters(size=24, steps=5, epsilon=5e-4, iterations=200, seed=0):
    """``{metric: (steps, steps, size, size)}`` grids interpolating the four corner glyphs."""
    corners = glyph_corners(size, seed)
    grids = {"euclidean": np.zeros((steps, steps, size, size)), "wasserstein": np.zeros((steps, steps, size, size))}
    ts = np.linspace(0.0, 1.0, steps)
    for i, y in enumerate(ts):
        for j, x in enumerate(ts):
            w = chebyshev_interpolation_weights((x, y))
            grids["euclidean"][i, j] = euclidean_barycenter(corners, w)
            grids["wasserstein"][i, j] = wasserstein_barycenter(corners, w, epsilon, iterations)
    return corners, grids


def svg_grid(grid, title=""):
    steps, _, h, w = grid.shape
    cell = 800 // steps
    px = cell / max(h, w)
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 800 800" width="800" height="800">',
             '<rect width="800" height="800" fill="white"/>']
    if title:
        parts.append(f"<title>{title}</title>")
    for i in range(steps):
        for j in range(steps):
            m = grid[i, j]
            peak = m.max() or 1.0
            for r, c in zip(*np.nonzero(m > 0.05 * peak)):
                g = int(round(255 * (1 - m[r, c] / peak)))
                parts.append(f'<rect x="{j * cell + c * px:.2f}" y="{i * cell + r * px:.2f}" '
                             f'width="{px:.2f}" height="{px:.2f}" fill="rgb({g},{g},{g})"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_barycenters(grids, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for metric, grid in grids.items():
        npy = out / f"barycenters_{metric}.npy"
        np.save(npy, grid)
        svg = out / f"barycenters_{metric}.svg"
        svg.write_text(svg_grid(grid, metric))
        files += [npy, svg]
    return files
