"""Parametric image artifacts and their injection into / removal from images.

Images are ``(c, h, w)`` arrays (or stacks ``(n, c, h, w)``) with pixel values
in ``[0, 1]``. An artifact pattern shares the image layout; its alpha map is
``(h, w)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("watermark", "border", "rounded_corners", "pasted_pattern")
PIXEL_RANGE = (0.0, 1.0)


@dataclass
class ArtifactMask:
    pattern: np.ndarray  # (c, h, w)
    alpha: np.ndarray  # (h, w) in [0, 1]
    kind: str
    anchor: tuple = ("fixed", "bottom_left")

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.kind not in KINDS:
            raise ValueError(f"unknown artifact kind {self.kind!r}")
        if self.pattern.ndim != 3 or self.pattern.shape[1:] != self.alpha.shape:
            raise ValueError("pattern must be (c, h, w) matching alpha (h, w)")
        if np.any(self.alpha < 0) or np.any(self.alpha > 1):
            raise ValueError("alpha must lie in [0, 1]")
        lo, hi = PIXEL_RANGE
        if np.any(self.pattern < lo) or np.any(self.pattern > hi):
            raise ValueError("pattern values outside the pixel range")

    @property
    def image_shape(self):
        return self.pattern.shape

    @property
    def support(self):
        return self.alpha > 0


def rounded_corner_support(h, w, radius):
    """Pixels of each ``radius``-square corner whose centre lies outside the
    inscribed quarter disc."""
    r = radius
    ii, jj = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
    corner = (r - ii - 0.5) ** 2 + (r - jj - 0.5) ** 2 > r**2  # top-left
    out = np.zeros((h, w), dtype=bool)
    out[:r, :r] |= corner
    out[:r, w - r :] |= corner[:, ::-1]
    out[h - r :, :r] |= corner[::-1, :]
    out[h - r :, w - r :] |= corner[::-1, ::-1]
    return out


def make_artifact(kind, params=None, seed=0) -> ArtifactMask:
    """Build an artifact of the given kind.

    Common params: ``image_shape`` (default ``(1, 28, 28)``), ``value`` (pattern
    intensity). Kind specific:

    - watermark: ``size`` (rows, cols), anchored at the bottom-left corner
    - border: ``width``
    - rounded_corners: ``radius``
    - pasted_pattern: ``size`` and ``region`` ``(r0, r1, c0, c1)``; a binary
      pattern and its top-left anchor inside ``region`` are drawn from ``seed``
    """
    p = dict(params or {})
    c, h, w = p.pop("image_shape", (1, 28, 28))
    rng = np.random.default_rng(seed)
    alpha = np.zeros((h, w))
    pattern = np.zeros((c, h, w))
    anchor = ("fixed", "bottom_left")

    if kind == "watermark":
        sh, sw = p.pop("size", (3, 3))
        value = p.pop("value", 1.0)
        if not (1 <= sh <= h and 1 <= sw <= w):
            raise ValueError(f"watermark size {(sh, sw)} exceeds image {(h, w)}")
        alpha[h - sh :, :sw] = 1.0
        pattern[:, h - sh :, :sw] = value
    elif kind == "border":
        width = p.pop("width", 2)
        value = p.pop("value", 0.5)
        if not 1 <= width <= min(h, w) // 2:
            raise ValueError(f"border width {width} invalid for image {(h, w)}")
        alpha[:] = 1.0
        alpha[width : h - width, width : w - width] = 0.0
        pattern[:, alpha > 0] = value
        anchor = ("fixed", "frame")
    elif kind == "rounded_corners":
        radius = p.pop("radius", 4)
        value = p.pop("value", 1.0)
        if not 1 <= radius <= min(h, w) // 2:
            raise ValueError(f"corner radius {radius} invalid for image {(h, w)}")
        alpha[rounded_corner_support(h, w, radius)] = 1.0
        pattern[:, alpha > 0] = value
        anchor = ("fixed", "corners")
    elif kind == "pasted_pattern":
        sh, sw = p.pop("size", (4, 4))
        r0, r1, c0, c1 = p.pop("region", (0, h, 0, w))
        value = p.pop("value", 1.0)
        if not (0 <= r0 and r1 <= h and 0 <= c0 and c1 <= w and r1 - r0 >= sh and c1 - c0 >= sw and sh >= 1 and sw >= 1):
            raise ValueError(f"pattern size {(sh, sw)} does not fit region {(r0, r1, c0, c1)} in {(h, w)}")
        top = int(rng.integers(r0, r1 - sh + 1))
        left = int(rng.integers(c0, c1 - sw + 1))
        bits = rng.integers(0, 2, size=(sh, sw)).astype(np.float64)
        alpha[top : top + sh, left : left + sw] = 1.0
        pattern[:, top : top + sh, left : left + sw] = value * bits
        anchor = ("random", (r0, r1, c0, c1), seed, (top, left))
    else:
        raise ValueError(f"unknown artifact kind {kind!r}; choose from {KINDS}")
    if p:
        raise ValueError(f"unknown parameters for {kind}: {sorted(p)}")
    return ArtifactMask(pattern, alpha, kind, anchor)


def _check_shape(images, mask):
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-3:] != mask.image_shape:
        raise ValueError(f"image shape {images.shape[-3:]} does not match mask {mask.image_shape}")
    return images


def inject(images, mask: ArtifactMask):
    """``(1 - alpha) * image + alpha * pattern``, clipped to the pixel range."""
    images = _check_shape(images, mask)
    out = (1.0 - mask.alpha) * images + mask.alpha * mask.pattern
    return np.clip(out, *PIXEL_RANGE)


def channel_stats(images):
    """Per-channel mean and standard deviation of an ``(n, c, h, w)`` stack."""
    images = np.asarray(images, dtype=np.float64)
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def remove(images, mask: ArtifactMask, fill="mean_fill", mean=None, std=None, seed=0):
    """Overwrite the artifact support with the channel mean (``mean_fill``) or
    seeded Gaussian noise around it (``noise_fill``).

    ``mean``/``std`` are per-channel dataset statistics; by default they are
    taken from ``images`` themselves.
    """
    images = _check_shape(images, mask)
    c = mask.image_shape[0]
    if mean is None or std is None:
        stack = images.reshape(-1, *mask.image_shape)
        m, s = channel_stats(stack)
        mean = m if mean is None else mean
        std = s if std is None else std
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (c,))
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), (c,))
    out = images.copy()
    sel = mask.support
    if fill == "mean_fill":
        values = np.broadcast_to(mean[:, None], (c, int(sel.sum())))
        out[..., sel] = values
    elif fill == "noise_fill":
        rng = np.random.default_rng(seed)
        shape = out[..., sel].shape
        out[..., sel] = mean[:, None] + std[:, None] * rng.standard_normal(shape)
    else:
        raise ValueError(f"fill must be 'mean_fill' or 'noise_fill', got {fill!r}")
    return out


def relevance_mass_fraction(attr, mask: ArtifactMask):
    """Share of positive relevance falling on the artifact support."""
    values = np.asarray(getattr(attr, "values", attr), dtype=np.float64)
    if values.shape != mask.alpha.shape:
        raise ValueError(f"map shape {values.shape} does not match mask {mask.alpha.shape}")
    pos = np.maximum(values, 0.0)
    total = pos.sum()
    if total <= 0:
        return 0.0
    return float(pos[mask.support].sum() / total)
