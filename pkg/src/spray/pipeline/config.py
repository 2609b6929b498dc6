"""Flat ``key = value`` pipeline configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Unknown keys are rejected. ``out_dir`` falls back to ``$SPRAY_OUT_DIR`` and
then to ``spray_out``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

SOURCES = ("dataset", "attributions", "toy_blobs")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    source: str = "dataset"
    data_dir: str = "."
    out_dir: str = ""
    # dataset source
    dataset: str = "dataset.npz"
    model: str = ""  # checkpoint; empty trains one
    arch: str = "cnn"
    train_epochs: int = 2
    train_lr: float = 0.02
    train_batch: int = 32
    attribution_target: str = "true"
    lrp_epsilon: float = 1e-6
    # attributions source
    attributions: str = "attributions.atr"
    metadata: str = "metadata.csv"
    # toy_blobs source
    toy_points: int = 100
    toy_sigma: float = 0.05
    classes: str = "all"
    preprocess_grid: str = "off"
    distance_metric: str = "euclidean"
    sinkhorn_epsilon: float = 1e-2
    sinkhorn_tol: float = 1e-7
    sinkhorn_max_iter: int = 10000
    gw_epsilon: float = 1e-2
    gw_outer_iter: int = 50
    gw_max_iter: int = 1000
    mass_fraction: float = 0.99
    knn_k: int = 10
    q: int = 32
    lanczos_tol: float = 1e-10
    kmeans_k_min: int = 2
    kmeans_k_max: int = 30
    kmeans_restarts: int = 5
    kmeans_max_iter: int = 300
    cluster_k: int = 0  # 0 = estimate from the spectrum
    eigengap_max_k: int = 10
    ridge: str = "auto"
    tsne_perplexity: float = 30.0
    tsne_iters: int = 1000
    seed: int = 0
    jobs: int = 1
    reproducible: bool = False

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------ helpers

    @property
    def out_path(self):
        return Path(self.out_dir or os.environ.get("SPRAY_OUT_DIR") or "spray_out")

    def data_path(self, name):
        p = Path(name)
        return p if p.is_absolute() else Path(self.data_dir) / p

    @property
    def grid(self):
        if self.preprocess_grid.strip().lower() in ("", "off", "none"):
            return None
        gh, gw = (int(v) for v in self.preprocess_grid.split(","))
        return gh, gw

    @property
    def ridge_value(self):
        return None if self.ridge.strip().lower() == "auto" else float(self.ridge)

    @property
    def class_list(self):
        if self.classes.strip().lower() == "all":
            return None
        return [int(c) for c in self.classes.split(",") if c.strip()]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.source in SOURCES, f"source must be one of {SOURCES}, got {self.source!r}")
        need(self.arch in ("mlp", "cnn"), f"arch must be mlp or cnn, got {self.arch!r}")
        need(self.attribution_target in ("true", "predicted"), "attribution_target must be true or predicted")
        need(self.distance_metric in ("euclidean", "wasserstein", "gromov_wasserstein", "gromov", "gw", "ot", "l2"),
             f"unknown distance_metric {self.distance_metric!r}")
        need(self.train_epochs >= 0, "train_epochs must be >= 0")
        need(self.train_lr > 0 and self.train_batch >= 1, "train_lr must be > 0 and train_batch >= 1")
        need(self.lrp_epsilon >= 0, "lrp_epsilon must be >= 0")
        need(self.toy_points >= 2 and self.toy_sigma > 0, "toy_points must be >= 2 and toy_sigma > 0")
        need(self.sinkhorn_epsilon > 0 and self.gw_epsilon > 0, "entropic epsilons must be positive")
        need(self.sinkhorn_tol > 0 and self.lanczos_tol > 0, "tolerances must be positive")
        need(self.sinkhorn_max_iter >= 1 and self.gw_outer_iter >= 1 and self.gw_max_iter >= 1, "iteration caps must be >= 1")
        need(0 < self.mass_fraction <= 1, "mass_fraction must lie in (0, 1]")
        need(self.knn_k >= 1, "knn_k must be >= 1")
        need(self.q >= 1, "q must be >= 1")
        need(2 <= self.kmeans_k_min <= self.kmeans_k_max, "need 2 <= kmeans_k_min <= kmeans_k_max")
        need(self.kmeans_restarts >= 1 and self.kmeans_max_iter >= 1, "kmeans_restarts and kmeans_max_iter must be >= 1")
        need(self.cluster_k == 0 or self.cluster_k >= 2, "cluster_k must be 0 (auto) or >= 2")
        need(self.eigengap_max_k >= 1, "eigengap_max_k must be >= 1")
        need(self.tsne_perplexity > 0 and self.tsne_iters >= 1, "tsne_perplexity must be > 0 and tsne_iters >= 1")
        need(self.seed >= 0 and self.jobs >= 1, "seed must be >= 0 and jobs >= 1")
        try:
            grid = self.grid
        except ValueError:
            raise ConfigError(f"preprocess_grid must be 'off' or 'gh,gw', got {self.preprocess_grid!r}") from None
        need(grid is None or min(grid) >= 1, "preprocess_grid cells must be >= 1")
        try:
            ridge = self.ridge_value
        except ValueError:
            raise ConfigError(f"ridge must be 'auto' or a number, got {self.ridge!r}") from None
        need(ridge is None or ridge >= 0, "ridge must be >= 0")
        try:
            self.class_list
        except ValueError:
            raise ConfigError(f"classes must be 'all' or a comma list of ids, got {self.classes!r}") from None


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}
CONFIG_KEYS = frozenset(_TYPES)


def _convert(key, raw):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text, base: PipelineConfig | None = None):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return apply_overrides(base or PipelineConfig(), values)


def load_config(path, base: PipelineConfig | None = None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, base)


def apply_overrides(cfg: PipelineConfig, values: dict):
    converted = {}
    for key, value in values.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        converted[key] = _convert(key, value) if isinstance(value, str) else value
    return cfg.replace(**converted)


def dump_config(cfg: PipelineConfig):
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in cfg.as_dict().items())
