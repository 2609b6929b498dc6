"""Synthetic shape datasets with a controllable shortcut artifact."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .artifacts import ArtifactMask, inject

SHAPES = ("bars", "discs", "crosses", "checkers", "rings")


@dataclass(frozen=True)
class GeneratorParams:
    num_classes: int = 5
    n_train: int = 500  # per class
    n_val: int = 100  # per class
    size: int = 28
    noise: float = 0.1
    contrast: float = 0.5  # shape intensity over the black background
    margin: int = 5  # shapes stay this far from the image edge
    jitter: float = 1.0  # max shift of the shape centre, pixels
    radius_range: tuple = (0.32, 0.36)  # shape half-extent as a fraction of the shape region

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must lie in [2, {len(SHAPES)}]")
        if self.n_train < 1 or self.n_val < 0:
            raise ValueError("need n_train >= 1 and n_val >= 0")
        if self.size < 2 * self.margin + 12:
            raise ValueError("image too small for the shape region")
        lo, hi = self.radius_range
        if not 0 < self.contrast <= 1:
            raise ValueError("contrast must lie in (0, 1]")
        if not 0 < lo <= hi <= 0.5 or self.jitter < 0:
            raise ValueError("radius_range must satisfy 0 < lo <= hi <= 0.5 and jitter >= 0")


@dataclass
class PoisonedDataset:
    images: np.ndarray  # (n, 1, s, s)
    labels: np.ndarray
    poisoned: np.ndarray  # bool flags
    sample_ids: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    val_poisoned: np.ndarray
    artifact_class: int = 0
    class_names: tuple = field(default_factory=tuple)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def val_sample_ids(self):
        return np.arange(len(self.val_images)) + len(self.images)

    def save(self, path):
        np.savez_compressed(
            path,
            images=self.images,
            labels=self.labels,
            poisoned=self.poisoned,
            sample_ids=self.sample_ids,
            val_images=self.val_images,
            val_labels=self.val_labels,
            val_poisoned=self.val_poisoned,
            artifact_class=self.artifact_class,
            class_names=np.array(self.class_names),
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(
                z["images"],
                z["labels"],
                z["poisoned"],
                z["sample_ids"],
                z["val_images"],
                z["val_labels"],
                z["val_poisoned"],
                int(z["artifact_class"]),
                tuple(str(s) for s in z["class_names"]),
            )


def _shape(kind, params, rng):
    size = params.size
    img = np.zeros((size, size))
    span = size - 2 * params.margin
    cy, cx = size / 2 + rng.uniform(-params.jitter, params.jitter, size=2)
    yy, xx = np.mgrid[:size, :size] + 0.5
    rad = rng.uniform(*params.radius_range) * span
    dy, dx = yy - cy, xx - cx
    inside = (np.abs(dy) <= rad) & (np.abs(dx) <= rad)
    if kind == "bars":
        period = rad / 1.5
        img[inside & (np.mod(dx + rad, period) < period / 2)] = 1.0
    elif kind == "discs":
        img[dy**2 + dx**2 <= rad**2] = 1.0
    elif kind == "crosses":
        t = rad * 0.3
        img[inside & ((np.abs(dy) <= t) | (np.abs(dx) <= t))] = 1.0
    elif kind == "checkers":
        cell = rad / 2
        img[inside & ((np.floor((dy + rad) / cell) + np.floor((dx + rad) / cell)) % 2 == 0)] = 1.0
    elif kind == "rings":
        r2 = dy**2 + dx**2
        img[(r2 <= rad**2) & (r2 >= (0.6 * rad) ** 2)] = 1.0
    else:
        raise ValueError(kind)
    return img


def generate_shapes(params: GeneratorParams, n_per_class, rng):
    """``n_per_class`` noisy shape images per class, grouped by class."""
    images, labels = [], []
    for cls in range(params.num_classes):
        for _ in range(n_per_class):
            img = params.contrast * _shape(SHAPES[cls], params, rng)
            img = img + params.noise * rng.standard_normal(img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(cls)
    images = np.asarray(images)[:, None]
    return images.reshape(-1, 1, params.size, params.size), np.asarray(labels, dtype=np.int64)


def _poison(images, labels, cls, fraction, mask, rng):
    members = np.flatnonzero(labels == cls)
    count = int(round(fraction * len(members)))
    chosen = rng.choice(members, size=count, replace=False)
    flags = np.zeros(len(labels), dtype=bool)
    flags[chosen] = True
    out = images.copy()
    if count:
        out[flags] = inject(images[flags], mask)
    return out, flags


def build_poisoned_dataset(params: GeneratorParams, poison_fraction, mask: ArtifactMask, seed=0, artifact_class=0):
    """Shape dataset whose ``artifact_class`` carries ``mask`` on exactly
    ``round(poison_fraction * class_size)`` samples (train and validation
    alike)."""
    if not 0.0 <= poison_fraction <= 1.0:
        raise ValueError(f"poison_fraction must lie in [0, 1], got {poison_fraction}")
    if not 0 <= artifact_class < params.num_classes:
        raise ValueError("artifact_class out of range")
    if mask.image_shape != (1, params.size, params.size):
        raise ValueError(f"mask shape {mask.image_shape} does not match generated images")
    rng = np.random.default_rng(seed)
    x, y = generate_shapes(params, params.n_train, rng)
    x, flags = _poison(x, y, artifact_class, poison_fraction, mask, rng)
    vx, vy = generate_shapes(params, params.n_val, rng)
    vx, vflags = _poison(vx, vy, artifact_class, poison_fraction, mask, rng)
    return PoisonedDataset(
        x, y, flags, np.arange(len(x)), vx, vy, vflags, artifact_class, SHAPES[: params.num_classes]
    )
