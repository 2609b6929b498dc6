"""Stage-by-stage pipeline execution with content-hash caching.

Exit codes:

====  ==========================================
0     success
2     configuration error
3     input/output error
10    attribute stage failed
11    preprocess stage failed
12    distances stage failed
13    affinity stage failed
14    spectral stage failed
15    tau stage failed
16    embed stage failed
17    report stage failed
====  ==========================================

Every stage stores a stamp holding the hash of its parameters and of the
contents of its input files. A stage whose stamp matches and whose outputs
exist is reported as ``cached`` and skipped. Because keys hash file contents,
editing any intermediate file re-runs exactly the stages downstream of it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..attribution import (
    AttributionMap,
    FormatError,
    TrainConfig,
    attribute_batch,
    load_checkpoint,
    make_network,
    maps_from_array,
    predict_logits,
    read_atr,
    read_metadata,
    save_checkpoint,
    sum_pool_grid,
    train_sgd,
    write_atr,
    write_metadata,
)
from ..clustering import ClusterAssignment, SeparabilityReport, kmeans, tau_score
from ..demos import four_blobs
from ..distances import DistanceParams, pairwise_distance_matrix, read_dst, write_dst
from ..embedding import PlanarEmbedding, tsne
from ..report import ClassResult, render_report
from ..spectral import (
    AffinityGraph,
    estimate_cluster_count,
    knn_affinity,
    read_emb,
    spectral_embedding,
    write_affinity_coo,
    write_emb,
)
from .config import ConfigError, PipelineConfig

log = logging.getLogger("spray")

STAGES = ("attribute", "preprocess", "distances", "affinity", "spectral", "tau", "embed", "report")
EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


def stage_exit_code(stage):
    return 10 + STAGES.index(stage)


class StageError(RuntimeError):
    def __init__(self, stage, message, code=None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.code = stage_exit_code(stage) if code is None else code


@dataclass
class PipelineResult:
    exit_code: int
    files: list = field(default_factory=list)
    statuses: list = field(default_factory=list)  # (stage, scope, "done" | "cached")
    message: str = ""

    @property
    def ok(self):
        return self.exit_code == 0


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StageCache:
    def __init__(self, root: Path):
        self.root = Path(root) / "stamps"

    def key(self, stage, params, inputs):
        payload = {"stage": stage, "params": params, "inputs": [file_digest(p) for p in inputs]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()

    def _stamp(self, name):
        return self.root / f"{name}.key"

    def fresh(self, name, key, outputs):
        stamp = self._stamp(name)
        return stamp.exists() and stamp.read_text() == key and all(Path(p).exists() for p in outputs)

    def commit(self, name, key):
        self.root.mkdir(parents=True, exist_ok=True)
        self._stamp(name).write_text(key)


# --------------------------------------------------------------------------- small file helpers


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def read_affinity_coo(path, n, k):
    import scipy.sparse as sp

    data = np.loadtxt(path, ndmin=2) if Path(path).stat().st_size else np.zeros((0, 3))
    rows, cols = data[:, 0].astype(int), data[:, 1].astype(int)
    mat = sp.csr_matrix((data[:, 2], (rows, cols)), shape=(n, n))
    mat.sort_indices()
    return AffinityGraph(mat, k)


# --------------------------------------------------------------------------- runner


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = cfg.out_path
        self.cache = StageCache(self.out)
        self.statuses = []
        self.files = []

    # -- bookkeeping -------------------------------------------------------

    def _run(self, stage, scope, params, inputs, outputs, fn):
        name = stage if scope is None else f"{stage}.{scope}"
        try:
            key = self.cache.key(stage, params, inputs)
        except OSError as exc:
            raise StageError(stage, f"cannot read input: {exc}", EXIT_IO) from None
        if self.cache.fresh(name, key, outputs):
            status = "cached"
        else:
            try:
                fn()
            except StageError:
                raise
            except (OSError, FormatError) as exc:
                raise StageError(stage, str(exc), EXIT_IO) from None
            except Exception as exc:  # noqa: BLE001 - every failure maps to the stage exit code
                raise StageError(stage, f"{type(exc).__name__}: {exc}") from None
            self.cache.commit(name, key)
            status = "done"
        log.info("%-10s %-8s %s", stage, scope if scope is not None else "-", status)
        self.statuses.append((stage, scope, status))
        self.files.extend(Path(p) for p in outputs)

    def _class_dir(self, cls):
        d = self.out / "classes" / f"c{cls}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    # -- stages ------------------------------------------------------------

    def attribute(self):
        cfg = self.cfg
        stage_dir = self.out / "attribute"
        stage_dir.mkdir(parents=True, exist_ok=True)
        atr, meta = stage_dir / "attributions.atr", stage_dir / "metadata.csv"
        outputs = [atr, meta]
        if cfg.source == "dataset":
            inputs = [cfg.data_path(cfg.dataset)] + ([cfg.data_path(cfg.model)] if cfg.model else [])
            params = {k: getattr(cfg, k) for k in ("arch", "train_epochs", "train_lr", "train_batch", "attribution_target", "lrp_epsilon", "seed")}
            model_out = stage_dir / "model.spnn"
            outputs.append(model_out)

            def fn():
                from ..ablation import PoisonedDataset

                data = PoisonedDataset.load(inputs[0])
                if cfg.model:
                    net = load_checkpoint(inputs[1])
                else:
                    net = make_network(cfg.arch, data.images.shape[1:], int(data.labels.max()) + 1, seed=cfg.seed)
                    tc = TrainConfig(learning_rate=cfg.train_lr, epochs=cfg.train_epochs, batch_size=cfg.train_batch, seed=cfg.seed)
                    net = train_sgd(net, data.images, data.labels, tc)
                save_checkpoint(net, model_out)
                maps = attribute_batch(net, data.images, data.labels, cfg.attribution_target, cfg.lrp_epsilon, list(data.sample_ids))
                write_atr(atr, maps)
                preds = predict_logits(net, data.images).argmax(axis=1)
                write_metadata(meta, [(int(s), int(y), int(p), m.predicted_rank_of_true_label)
                                      for s, y, p, m in zip(data.sample_ids, data.labels, preds, maps)])

        elif cfg.source == "attributions":
            inputs = [cfg.data_path(cfg.attributions), cfg.data_path(cfg.metadata)]
            params = {}

            def fn():
                values = read_atr(inputs[0])
                rows = read_metadata(inputs[1])
                if len(rows) != len(values):
                    raise FormatError(f"{len(values)} maps but {len(rows)} metadata rows")
                write_atr(atr, maps_from_array(values, rows))
                write_metadata(meta, rows)

        else:
            inputs = []
            params = {"toy_points": cfg.toy_points, "toy_sigma": cfg.toy_sigma, "seed": cfg.seed}

            def fn():
                pts, _ = four_blobs(cfg.toy_points, cfg.toy_sigma, cfg.seed)
                write_atr(atr, [AttributionMap(p[None, :], i) for i, p in enumerate(pts)])
                write_metadata(meta, [(i, 0, 0, 1) for i in range(len(pts))])

        self._run("attribute", None, params, inputs, outputs, fn)
        return atr, meta

    def classes(self, meta):
        _, rows = _read_rows(meta)
        present = sorted({int(r[1]) for r in rows})
        wanted = self.cfg.class_list
        if wanted is None:
            return present
        missing = sorted(set(wanted) - set(present))
        if missing:
            raise StageError("attribute", f"classes {missing} not present in the attributions")
        return wanted

    def preprocess(self, cls, atr, meta):
        d = self._class_dir(cls)
        maps_out, ids_out = d / "maps.atr", d / "ids.csv"
        grid = self.cfg.grid

        def fn():
            values = read_atr(atr)
            _, rows = _read_rows(meta)
            idx = [i for i, r in enumerate(rows) if int(r[1]) == cls]
            sel = values[idx]
            if grid is not None:
                sel = np.stack([sum_pool_grid(AttributionMap(v), grid).values for v in sel])
            write_atr(maps_out, [AttributionMap(v, rows[i][0]) for v, i in zip(sel, idx)])
            _write_rows(ids_out, ["sample_id", "predicted_class", "true_label_rank"], [[rows[i][0], rows[i][2], rows[i][3]] for i in idx])

        self._run("preprocess", cls, {"grid": grid, "class": cls}, [atr, meta], [maps_out, ids_out], fn)
        return maps_out, ids_out

    def distances(self, cls, maps_path):
        cfg = self.cfg
        out = self._class_dir(cls) / "distances.dst"
        params = DistanceParams(cfg.sinkhorn_epsilon, cfg.sinkhorn_tol, cfg.sinkhorn_max_iter, cfg.gw_epsilon,
                                cfg.gw_outer_iter, cfg.gw_max_iter, cfg.mass_fraction, cfg.jobs)

        def fn():
            write_dst(out, pairwise_distance_matrix(read_atr(maps_path), cfg.distance_metric, params))

        key_params = {"metric": cfg.distance_metric, **{k: v for k, v in params.__dict__.items() if k != "jobs"}}
        self._run("distances", cls, key_params, [maps_path], [out], fn)
        return out

    def affinity(self, cls, dst_path):
        out = self._class_dir(cls) / "affinity.txt"
        k = self.cfg.knn_k

        def fn():
            dm = read_dst(dst_path)
            if not 1 <= k < dm.n:
                raise ValueError(f"knn_k={k} must be smaller than the class size n={dm.n}")
            write_affinity_coo(out, knn_affinity(dm, k))

        self._run("affinity", cls, {"knn_k": k}, [dst_path], [out], fn)
        return out

    def spectral(self, cls, aff_path, n):
        cfg = self.cfg
        out = self._class_dir(cls) / "embedding.emb"

        def fn():
            graph = read_affinity_coo(aff_path, n, cfg.knn_k)
            write_emb(out, spectral_embedding(graph, cfg.q, cfg.lanczos_tol, seed=cfg.seed))

        self._run("spectral", cls, {"q": cfg.q, "tol": cfg.lanczos_tol, "seed": cfg.seed}, [aff_path], [out], fn)
        return out

    def tau(self, cls, emb_path, ids_path):
        cfg = self.cfg
        d = self._class_dir(cls)
        tau_out, clusters_out = d / "tau.csv", d / "clusters.csv"
        params = {k: getattr(cfg, k) for k in ("kmeans_k_min", "kmeans_k_max", "kmeans_restarts", "kmeans_max_iter",
                                                "cluster_k", "eigengap_max_k", "ridge", "seed")}

        def fn():
            emb = read_emb(emb_path)
            _, rows = _read_rows(ids_path)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                rep = tau_score(emb.phi, cfg.kmeans_k_min, cfg.kmeans_k_max, cfg.seed, cfg.ridge_value, cls,
                                cfg.kmeans_restarts, cfg.kmeans_max_iter)
            _write_rows(tau_out, ["k", "score"], [[k, repr(float(s))] for k, s in sorted(rep.per_k_scores.items())])
            n = len(emb.phi)
            k = cfg.cluster_k or estimate_cluster_count(emb.eigenvalues, cfg.eigengap_max_k)
            k = int(min(max(k, 2), n, emb.q))
            # classic spectral clustering: k-means on the leading k eigenvectors
            assignment = kmeans(emb.phi[:, :k], k, cfg.seed, cfg.kmeans_max_iter, cfg.kmeans_restarts)
            _write_rows(clusters_out, ["sample_id", "cluster"], [[r[0], int(c)] for r, c in zip(rows, assignment.labels)])

        self._run("tau", cls, params, [emb_path, ids_path], [tau_out, clusters_out], fn)
        return tau_out, clusters_out

    def embed(self, cls, emb_path, ids_path):
        cfg = self.cfg
        out = self._class_dir(cls) / "tsne.csv"

        def fn():
            emb = read_emb(emb_path)
            _, rows = _read_rows(ids_path)
            n = len(emb.phi)
            # small classes: cap perplexity just below n / 3
            perplexity = min(cfg.tsne_perplexity, (n - 1) / 3.0)
            z = tsne(emb.phi, perplexity, cfg.seed, cfg.tsne_iters)
            _write_rows(out, ["sample_id", "x", "y", "kl"], [[r[0], repr(float(x)), repr(float(y)), repr(z.kl_divergence)]
                                                             for r, (x, y) in zip(rows, z.coords)])

        params = {"perplexity": cfg.tsne_perplexity, "iters": cfg.tsne_iters, "seed": cfg.seed}
        self._run("embed", cls, params, [emb_path, ids_path], [out], fn)
        return out

    def report(self, per_class, names):
        out = self.out / "report"
        inputs = [p for cls in sorted(per_class) for p in per_class[cls]]
        expected = [out / "eigenvalues.csv", out / "embedding_2d.csv", out / "tau_ranking.csv", out / "report.html"]
        written = []

        def fn():
            results = []
            for cls in sorted(per_class):
                emb_path, tau_path, clusters_path, tsne_path = per_class[cls]
                emb = read_emb(emb_path)
                _, tau_rows = _read_rows(tau_path)
                _, cl_rows = _read_rows(clusters_path)
                _, ts_rows = _read_rows(tsne_path)
                labels = np.array([int(r[1]) for r in cl_rows])
                k = int(labels.max()) + 1
                coords = np.array([[float(r[1]), float(r[2])] for r in ts_rows])
                kl = float(ts_rows[0][3]) if ts_rows else 0.0
                results.append(ClassResult(
                    cls,
                    np.array([int(r[0]) for r in cl_rows]),
                    emb.eigenvalues,
                    PlanarEmbedding(coords, kl, self.cfg.tsne_perplexity, self.cfg.seed),
                    ClusterAssignment(labels, k, 0.0, self.cfg.seed),
                    SeparabilityReport(cls, {int(r[0]): float(r[1]) for r in tau_rows}),
                    names.get(cls, ""),
                ))
            written.extend(render_report(results, out, reproducible=self.cfg.reproducible))

        self._run("report", None, {"reproducible": self.cfg.reproducible, "names": names}, inputs, expected, fn)
        # the full listing (cluster member files, svgs) is known once the report exists
        listed = sorted(p for p in out.rglob("*") if p.is_file())
        self.files = [f for f in self.files if f.parent != out] + listed
        return listed

    # -- driver ------------------------------------------------------------

    def run(self):
        self.out.mkdir(parents=True, exist_ok=True)
        atr, meta = self.attribute()
        try:
            classes = self.classes(meta)
        except (OSError, IndexError) as exc:
            raise StageError("attribute", f"unreadable metadata: {exc}", EXIT_IO) from None
        names = {}
        if self.cfg.source == "dataset":
            try:
                with np.load(self.cfg.data_path(self.cfg.dataset)) as z:
                    if "class_names" in z:
                        names = {i: str(s) for i, s in enumerate(z["class_names"])}
            except (OSError, ValueError):
                names = {}
        per_class = {}
        for cls in classes:
            maps, ids = self.preprocess(cls, atr, meta)
            _, rows = _read_rows(ids)
            dst = self.distances(cls, maps)
            aff = self.affinity(cls, dst)
            emb = self.spectral(cls, aff, len(rows))
            tau_out, clusters_out = self.tau(cls, emb, ids)
            ts = self.embed(cls, emb, ids)
            per_class[cls] = (emb, tau_out, clusters_out, ts)
        self.report(per_class, names)
        self._write_manifest()
        return classes

    def _write_manifest(self):
        path = self.out / "manifest.txt"
        lines = sorted(f"{file_digest(p)}  {p.relative_to(self.out).as_posix()}" for p in set(self.files))
        path.write_text("".join(line + "\n" for line in lines))
        self.files.append(path)


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Run every stage for every class; never raises for pipeline failures."""
    try:
        cfg.validate()
    except ConfigError as exc:
        return PipelineResult(EXIT_CONFIG, message=str(exc))
    pipe = Pipeline(cfg)
    try:
        pipe.run()
    except StageError as exc:
        return PipelineResult(exc.code, pipe.files, pipe.statuses, str(exc))
    except OSError as exc:
        return PipelineResult(EXIT_IO, pipe.files, pipe.statuses, str(exc))
    return PipelineResult(EXIT_OK, sorted(set(pipe.files)), pipe.statuses, "ok")


def load_class_outputs(out_dir, cls):
    """Spectral embedding, cluster labels and sample ids of one analysed class."""
    d = Path(out_dir) / "classes" / f"c{cls}"
    _, rows = _read_rows(d / "clusters.csv")
    return read_emb(d / "embedding.emb"), np.array([int(r[1]) for r in rows]), np.array([int(r[0]) for r in rows])


def load_ranking(out_dir):
    from ..clustering import read_ranking_csv

    return read_ranking_csv(Path(out_dir) / "report" / "tau_ranking.csv")


__all__ = [
    "STAGES",
    "Pipeline",
    "PipelineResult",
    "StageCache",
    "StageError",
    "file_digest",
    "load_class_outputs",
    "load_ranking",
    "run_pipeline",
    "stage_exit_code",
]
