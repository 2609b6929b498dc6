"""Command line entry point: ``spray <subcommand> [options] [--key value ...]``.

Any ``PipelineConfig`` key can be overridden as ``--key value`` (dashes and
underscores are interchangeable). Exit codes follow the pipeline table (0 ok,
2 config, 3 I/O, 10 + stage index for stage failures); the subcommands outside
the pipeline use the codes in ``TOOL_CODES``.
"""

from __future__ import annotations

import argparse
import ast
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .pipeline import (
    ConfigError,
    PipelineConfig,
    apply_overrides,
    load_config,
    run_pipeline,
    stage_exit_code,
)
from .pipeline.config import CONFIG_KEYS

log = logging.getLogger("spray")

EXIT_CONFIG, EXIT_IO = 2, 3
TOOL_CODES = {"inject": 20, "ablate": 21, "unhans": 22, "demo-fig2": 23, "demo-fig3": 24, "make-poisoned": 25, "train": 26}
STAGE_OF = {"attribute": "attribute", "distances": "distances", "spectral": "spectral", "rank": "tau", "embed": "embed", "report": "report"}


class CliError(RuntimeError):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def failure_code(command):
    if command in STAGE_OF:
        return stage_exit_code(STAGE_OF[command])
    return TOOL_CODES.get(command, 1)


# --------------------------------------------------------------------------- parsing helpers


def _overrides(extra):
    """``["--knn-k", "5", ...]`` -> ``{"knn_k": "5"}``."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{tok} needs a value")
            value = extra[i + 1]
            i += 2
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown option --{key}")
        out[key] = value
    return out


def build_config(args, extra):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    values = _overrides(extra)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.jobs is not None:
        values["jobs"] = args.jobs
    if args.reproducible:
        values["reproducible"] = True
    return apply_overrides(cfg, values)


def _literal(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def artifact_params(pairs):
    """``["size=(3,3)", "value=0.8"]`` -> dict."""
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"artifact parameter {pair!r} is not key=value")
        k, v = pair.split("=", 1)
        out[k.strip()] = _literal(v.strip())
    return out


def _mask(args, shape):
    from .ablation import make_artifact

    params = artifact_params(args.artifact_param)
    params.setdefault("image_shape", tuple(shape))
    try:
        return make_artifact(args.artifact, params, seed=args.artifact_seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load_dataset(path):
    from .ablation import PoisonedDataset

    try:
        return PoisonedDataset.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot read dataset {path}: {exc}") from None


def _load_model(path):
    from .attribution import load_checkpoint

    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot read model {path}: {exc}") from None


def _train_cfg(cfg, epochs=None, lr=None, weight_decay=0.0, seed=None):
    from .attribution import TrainConfig

    return TrainConfig(
        learning_rate=cfg.train_lr if lr is None else lr,
        epochs=cfg.train_epochs if epochs is None else epochs,
        batch_size=cfg.train_batch,
        seed=cfg.seed if seed is None else seed,
        weight_decay=weight_decay,
    )


def _out(path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------------------- subcommands


def cmd_run(args, cfg):
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    result = run_pipeline(cfg)
    for stage, scope, status in result.statuses:
        print(f"{stage:<10} {'-' if scope is None else scope:<6} {status}")
    if result.exit_code:
        print(f"error: {result.message}", file=sys.stderr)
    else:
        print(f"manifest: {cfg.out_path / 'manifest.txt'}")
    return result.exit_code


def cmd_attribute(args, cfg):
    from .pipeline import Pipeline

    cfg = cfg.replace(out_dir=args.out or cfg.out_dir, **({"dataset": args.dataset} if args.dataset else {}),
                      **({"model": args.model} if args.model else {}))
    atr, meta = Pipeline(cfg).attribute()
    print(atr)
    print(meta)
    return 0


def cmd_distances(args, cfg):
    from .attribution import read_atr
    from .distances import DistanceParams, pairwise_distance_matrix, write_dst

    metric = args.metric or cfg.distance_metric
    maps = read_atr(args.atr)
    params = DistanceParams(cfg.sinkhorn_epsilon, cfg.sinkhorn_tol, cfg.sinkhorn_max_iter, cfg.gw_epsilon,
                            cfg.gw_outer_iter, cfg.gw_max_iter, cfg.mass_fraction, cfg.jobs)
    dm = pairwise_distance_matrix(maps, metric, params)
    write_dst(_out(args.out), dm)
    print(args.out)
    return 0


def cmd_spectral(args, cfg):
    from .distances import read_dst
    from .spectral import (
        knn_affinity,
        spectral_embedding,
        write_affinity_coo,
        write_emb,
    )

    dm = read_dst(args.dst)
    graph = knn_affinity(dm, cfg.knn_k)
    if args.affinity:
        write_affinity_coo(_out(args.affinity), graph)
    emb = spectral_embedding(graph, cfg.q, cfg.lanczos_tol, seed=cfg.seed)
    write_emb(_out(args.out), emb)
    print(args.out)
    return 0


def cmd_rank(args, cfg):
    from .clustering import rank_classes, tau_score, write_ranking_csv
    from .spectral import read_emb

    paths = args.emb
    if args.run_dir:
        found = sorted(Path(args.run_dir, "classes").glob("c*/embedding.emb"), key=lambda p: int(p.parent.name[1:]))
        paths = [str(p) for p in found]
        ids = [int(p.parent.name[1:]) for p in found]
    else:
        ids = [int(c) for c in args.class_ids.split(",")] if args.class_ids else list(range(len(paths)))
    if not paths:
        raise ConfigError("rank needs --emb files or --run-dir")
    if len(ids) != len(paths):
        raise ConfigError("--class-ids must list one id per --emb file")
    reports = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for cls, path in zip(ids, paths):
            phi = read_emb(path).phi
            reports.append(tau_score(phi, cfg.kmeans_k_min, cfg.kmeans_k_max, cfg.seed, cfg.ridge_value, cls,
                                     cfg.kmeans_restarts, cfg.kmeans_max_iter))
    write_ranking_csv(_out(args.out), reports)
    for rep in rank_classes(reports):
        print(f"class {rep.class_id}: tau = {rep.tau:.6g}")
    return 0


def cmd_embed(args, cfg):
    from .clustering import kmeans
    from .embedding import tsne
    from .spectral import estimate_cluster_count, read_emb

    emb = read_emb(args.emb)
    n = len(emb.phi)
    k = cfg.cluster_k or estimate_cluster_count(emb.eigenvalues, cfg.eigengap_max_k)
    k = int(min(max(k, 2), n, emb.q))
    labels = kmeans(emb.phi[:, :k], k, cfg.seed, cfg.kmeans_max_iter, cfg.kmeans_restarts).labels
    z = tsne(emb.phi, min(cfg.tsne_perplexity, (n - 1) / 3.0), cfg.seed, cfg.tsne_iters)
    with open(_out(args.out), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "x", "y", "cluster"])
        w.writerows([i, format(x, ".9g"), format(y, ".9g"), int(c)] for i, ((x, y), c) in enumerate(zip(z.coords, labels)))
    print(f"{args.out} (kl = {z.kl_divergence:.6g})")
    return 0


def cmd_report(args, cfg):
    from .pipeline import Pipeline

    run_dir = Path(args.run_dir)
    per_class = {}
    for d in sorted((run_dir / "classes").glob("c*"), key=lambda p: int(p.name[1:])):
        files = [d / "embedding.emb", d / "tau.csv", d / "clusters.csv", d / "tsne.csv"]
        if not all(f.exists() for f in files):
            raise CliError(EXIT_IO, f"{d} is missing pipeline outputs")
        per_class[int(d.name[1:])] = tuple(files)
    if not per_class:
        raise CliError(EXIT_IO, f"no analysed classes under {run_dir}")
    pipe = Pipeline(cfg.replace(out_dir=str(run_dir)))
    for path in pipe.report(per_class, {}):
        print(path)
    return 0


def cmd_make_poisoned(args, cfg):
    from .ablation import GeneratorParams, build_poisoned_dataset

    params = GeneratorParams(num_classes=args.classes, n_train=args.n_train, n_val=args.n_val)
    mask = _mask(args, (1, params.size, params.size))
    data = build_poisoned_dataset(params, args.fraction, mask, seed=cfg.seed, artifact_class=args.artifact_class)
    data.save(_out(args.out))
    print(f"{args.out}: {len(data.images)} train / {len(data.val_images)} val, {int(data.poisoned.sum())} poisoned")
    return 0


def cmd_train(args, cfg):
    from .attribution import accuracy, make_network, save_checkpoint, train_sgd

    data = _load_dataset(args.dataset)
    net = make_network(args.arch or cfg.arch, data.images.shape[1:], data.num_classes or int(data.labels.max()) + 1, seed=cfg.seed)
    net = train_sgd(net, data.images, data.labels, _train_cfg(cfg))
    save_checkpoint(net, _out(args.out))
    print(f"{args.out}: train accuracy {accuracy(net, data.images, data.labels):.4f}")
    return 0


def cmd_inject(args, cfg):
    from .ablation import inject

    data = _load_dataset(args.dataset)
    mask = _mask(args, data.images.shape[1:])
    sel = np.ones(len(data.images), bool) if args.target_class is None else data.labels == args.target_class
    vsel = np.ones(len(data.val_images), bool) if args.target_class is None else data.val_labels == args.target_class
    data.images = data.images.copy()
    data.val_images = data.val_images.copy()
    data.images[sel] = inject(data.images[sel], mask)
    data.val_images[vsel] = inject(data.val_images[vsel], mask)
    data.save(_out(args.out))
    print(f"{args.out}: injected into {int(sel.sum())} train / {int(vsel.sum())} val samples")
    return 0


def cmd_ablate(args, cfg):
    from .ablation import (
        addition_study,
        channel_stats,
        removal_study,
        write_ablation_csv,
    )

    data = _load_dataset(args.dataset)
    model = _load_model(args.model)
    mask = _mask(args, data.images.shape[1:])
    cls = data.artifact_class if args.artifact_class is None else args.artifact_class
    x, y, ids = data.val_images, data.val_labels, data.val_sample_ids
    if args.study == "addition":
        keep = y != cls
        res = addition_study(model, x[keep], mask, cls, n=args.n, seed=cfg.seed, labels=y[keep], sample_ids=ids[keep])
    else:
        keep = data.val_poisoned if args.affected == "poisoned" else y == cls
        mean, std = channel_stats(data.images)
        res = removal_study(model, x[keep], mask, cls, args.fill, mean, std, cfg.seed, args.n, ids[keep])
    write_ablation_csv(_out(args.out), res)
    print(f"{args.study}: n = {res.n_samples}, mean delta rank = {res.mean_delta_rank:.4f}, "
          f"mean delta prob = {res.mean_delta_prob:.4f}")
    return 0


def cmd_unhans(args, cfg):
    from .ablation import unhans_experiment, write_unhans_csv

    data = _load_dataset(args.dataset)
    model = _load_model(args.model)
    mask = _mask(args, data.images.shape[1:])
    cls = data.artifact_class if args.artifact_class is None else args.artifact_class
    tc = _train_cfg(cfg, epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay, seed=cfg.seed + 1)
    rec = unhans_experiment(model, data, cls, mask, tc)
    write_unhans_csv(_out(args.out), rec)
    m = rec.matrix()
    print(f"acc A: val_A {m[0, 0]:.4f} val_B {m[0, 1]:.4f}")
    print(f"acc B: val_A {m[1, 0]:.4f} val_B {m[1, 1]:.4f}")
    return 0


def cmd_demo_fig2(args, cfg):
    from .demos import toy_clustering, write_toy

    res = toy_clustering(cfg.toy_points, cfg.toy_sigma, cfg.knn_k, cfg.q, cfg.seed, cfg.eigengap_max_k)
    for p in write_toy(res, args.out, cfg.reproducible):
        print(p)
    print(f"estimated clusters: {res.k}")
    return 0


def cmd_demo_fig3(args, cfg):
    from .demos import glyph_barycenters, write_barycenters

    _, grids = glyph_barycenters(args.size, args.steps, args.epsilon, args.iterations, cfg.seed)
    for p in write_barycenters(grids, args.out):
        print(p)
    return 0


# --------------------------------------------------------------------------- parser


def _artifact_args(p):
    p.add_argument("--artifact", default="watermark", help="watermark | border | rounded_corners | pasted_pattern")
    p.add_argument("--artifact-param", action="append", metavar="KEY=VALUE", help="e.g. size=(3,3); repeatable")
    p.add_argument("--artifact-seed", type=int, default=0)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--reproducible", action="store_true", help="suppress timestamps in generated files")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="spray", description="Spectral analysis of attribution maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    p = add("run", cmd_run, "full pipeline for every class")
    p.add_argument("--out")

    p = add("attribute", cmd_attribute, "train or load a model and compute attribution maps")
    p.add_argument("--dataset")
    p.add_argument("--model")
    p.add_argument("--out")

    p = add("distances", cmd_distances, "pairwise distance matrix of an ATR1 file")
    p.add_argument("--atr", required=True)
    p.add_argument("--metric")
    p.add_argument("--out", required=True)

    p = add("spectral", cmd_spectral, "KNN graph and spectral embedding of a DST1 file")
    p.add_argument("--dst", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--affinity", help="optional i j value export")

    p = add("rank", cmd_rank, "separability ranking of classes")
    p.add_argument("--emb", action="append", default=[])
    p.add_argument("--class-ids")
    p.add_argument("--run-dir", help="take every class embedding of a pipeline run")
    p.add_argument("--out", required=True)

    p = add("embed", cmd_embed, "2-D t-SNE of a spectral embedding with cluster labels")
    p.add_argument("--emb", required=True)
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "re-render the report of a pipeline run")
    p.add_argument("--run-dir", required=True)

    p = add("make-poisoned", cmd_make_poisoned, "synthetic shape dataset with an artifact on one class")
    _artifact_args(p)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--artifact-class", type=int, default=0)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a toy classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch")
    p.add_argument("--out", required=True)

    p = add("inject", cmd_inject, "paste an artifact into a dataset")
    _artifact_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--target-class", type=int, help="only this class (default: all)")
    p.add_argument("--out", required=True)

    p = add("ablate", cmd_ablate, "artifact addition or removal study")
    _artifact_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--study", choices=("addition", "removal"), default="addition")
    p.add_argument("--fill", choices=("mean_fill", "noise_fill"), default="mean_fill")
    p.add_argument("--affected", choices=("poisoned", "class"), default="poisoned")
    p.add_argument("--artifact-class", type=int)
    p.add_argument("-n", type=int, default=2000)
    p.add_argument("--out", required=True)

    p = add("unhans", cmd_unhans, "fine-tune with the artifact on every sample")
    _artifact_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--artifact-class", type=int)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--weight-decay", type=float, default=0.005)
    p.add_argument("--out", required=True)

    p = add("demo-fig2", cmd_demo_fig2, "spectral clustering of four toy blobs")
    p.add_argument("--out", required=True)

    p = add("demo-fig3", cmd_demo_fig3, "barycenter grid between four glyphs")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=24)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--epsilon", type=float, default=5e-4)
    p.add_argument("--iterations", type=int, default=200)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = build_config(args, extra)
        return args.fn(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001
        from .attribution import FormatError
        from .pipeline import StageError

        if isinstance(exc, StageError):
            print(f"error: {exc}", file=sys.stderr)
            return exc.code
        if isinstance(exc, (OSError, FormatError)):
            print(f"i/o error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return failure_code(args.command)


if __name__ == "__main__":
    sys.exit(main())
