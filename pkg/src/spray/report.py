"""Static analysis reports: CSV tables, per-class SVG scatters and an HTML index."""

from __future__ import annotations

import csv
import html
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import (
    ClusterAssignment,
    SeparabilityReport,
    rank_classes,
    write_ranking_csv,
)
from .embedding import PlanarEmbedding
from .spectral import eigengap_estimate

PALETTE = (
    "#1f77b4",
    "#ff7f0e",
    "#2ca02c",
    "#d62728",
    "#9467bd",
    "#8c564b",
    "#e377c2",
    "#7f7f7f",
    "#bcbd22",
    "#17becf",
    "#393b79",
    "#ad494a",
)
CANVAS = 800
MARGIN = 40


@dataclass
class ClassResult:
    """Everything the report needs about one analysed class."""

    class_id: int
    sample_ids: np.ndarray
    eigenvalues: np.ndarray
    embedding: PlanarEmbedding
    clusters: ClusterAssignment
    separability: SeparabilityReport
    name: str = ""


def _g9(v):
    return format(float(v), ".9g")


def _check(result: ClassResult):
    n = len(result.sample_ids)
    if result.embedding.coords.shape != (n, 2) or len(result.clusters.labels) != n:
        raise ValueError(f"class {result.class_id}: inconsistent sample counts")


def svg_scatter(coords, labels, title="", reproducible=True):
    """One ``<circle>`` per point on an 800x800 canvas, filled by cluster id."""
    coords = np.asarray(coords, dtype=np.float64)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = MARGIN + (coords - lo) / span * (CANVAS - 2 * MARGIN)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {CANVAS} {CANVAS}" width="{CANVAS}" height="{CANVAS}">']
    if not reproducible:
        lines.append(f"<!-- generated {time.strftime('%Y-%m-%dT%H:%M:%S')} -->")
    if title:
        lines.append(f'<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="16">{html.escape(title)}</text>')
    for (x, y), c in zip(xy, labels):
        # screen y grows downward
        lines.append(f'<circle cx="{x:.2f}" cy="{CANVAS - y:.2f}" r="3" fill="{PALETTE[int(c) % len(PALETTE)]}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)


def _eigengap_rows(lam):
    lam = np.asarray(lam)
    k = eigengap_estimate(lam, min(10, len(lam) - 1)) if len(lam) >= 3 else len(lam)
    return [(i + 1, lam[i], lam[i + 1] - lam[i] if i + 1 < len(lam) else float("nan")) for i in range(k)]


def _html(results, ranked, svgs):
    out = [
        "<!DOCTYPE html>",
        "<html><head><meta charset='utf-8'><title>Spectral relevance report</title></head><body>",
        "<h1>Spectral relevance report</h1>",
        "<h2>Classes ranked by separability</h2>",
        "<table border='1'><tr><th>rank</th><th>class</th><th>tau</th><th>samples</th><th>clusters</th></tr>",
    ]
    by_id = {r.class_id: r for r in results}
    for pos, rep in enumerate(ranked, 1):
        res = by_id[rep.class_id]
        label = html.escape(res.name or str(res.class_id))
        out.append(
            f"<tr><td>{pos}</td><td>{label}</td><td>{rep.tau:.4f}</td>"
            f"<td>{len(res.sample_ids)}</td><td>{res.clusters.k}</td></tr>"
        )
    out.append("</table>")
    out.append("<p>Tables: <a href='eigenvalues.csv'>eigenvalues.csv</a>, "
               "<a href='embedding_2d.csv'>embedding_2d.csv</a>, <a href='tau_ranking.csv'>tau_ranking.csv</a></p>")
    for res in results:
        out.append(f"<h2>Class {html.escape(res.name or str(res.class_id))}</h2>")
        out.append("<table border='1'><tr><th>i</th><th>eigenvalue</th><th>gap to next</th></tr>")
        for i, lam, gap in _eigengap_rows(res.eigenvalues):
            out.append(f"<tr><td>{i}</td><td>{lam:.3e}</td><td>{gap:.3e}</td></tr>")
        out.append("</table>")
        out.append(f"<p><img src='{svgs[res.class_id]}' width='400' alt='embedding of class {res.class_id}'></p>")
        out.append("<ul>")
        for j in range(res.clusters.k):
            name = f"clusters/class{res.class_id}_cluster{j}.txt"
            out.append(f"<li><a href='{name}'>cluster {j}</a> ({int((res.clusters.labels == j).sum())} samples)</li>")
        out.append("</ul>")
    out.append("</body></html>")
    return "\n".join(out) + "\n"


def render_report(results, out_dir, reproducible=False):
    """Write the report files for a list of :class:`ClassResult` and return
    their paths. Existing files are overwritten."""
    results = list(results)
    if not results:
        raise ValueError("no class results to report")
    for res in results:
        _check(res)
    out = Path(out_dir)
    (out / "clusters").mkdir(parents=True, exist_ok=True)
    written = []

    rows = []
    for res in results:
        for i, lam in enumerate(res.eigenvalues, 1):
            rows.append([res.class_id, i, repr(float(lam))])
    _write_csv(out / "eigenvalues.csv", ["class_id", "index", "eigenvalue"], rows)
    written.append(out / "eigenvalues.csv")

    rows = []
    for res in results:
        for sid, (x, y), c in zip(res.sample_ids, res.embedding.coords, res.clusters.labels):
            rows.append([int(sid), _g9(x), _g9(y), int(c)])
    _write_csv(out / "embedding_2d.csv", ["sample_id", "x", "y", "cluster"], rows)
    written.append(out / "embedding_2d.csv")

    reports = [res.separability for res in results]
    write_ranking_csv(out / "tau_ranking.csv", reports)
    written.append(out / "tau_ranking.csv")

    svgs = {}
    for res in results:
        for j in range(res.clusters.k):
            path = out / "clusters" / f"class{res.class_id}_cluster{j}.txt"
            members = np.asarray(res.sample_ids)[res.clusters.labels == j]
            path.write_text("".join(f"{int(s)}\n" for s in members))
            written.append(path)
        name = f"class{res.class_id}.svg"
        title = f"class {res.name or res.class_id}"
        (out / name).write_text(svg_scatter(res.embedding.coords, res.clusters.labels, title, reproducible))
        svgs[res.class_id] = name
        written.append(out / name)

    (out / "report.html").write_text(_html(results, rank_classes(reports), svgs))
    written.append(out / "report.html")
    return written


def read_embedding_csv(path):
    """Parse ``embedding_2d.csv`` back into ``(sample_ids, coords, clusters)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(np.int64), data[:, 1:3], data[:, 3].astype(np.int64)
