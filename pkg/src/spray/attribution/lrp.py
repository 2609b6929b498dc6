"""Layer-wise relevance propagation with a layer-type dependent rule assignment.

Composite assignment used by :func:`lrp_composite`:

* dense layers: epsilon rule
* lowest convolution: flat rule
* all other convolutions: alpha-beta rule with alpha=1, beta=0
* maxpool: winner-take-all; relu and flatten: identity

All rules act on batches (leading sample axis). Pre-activations in the rule
denominators exclude the bias, so every rule conserves relevance layer by layer
(up to the epsilon stabilizer and the dropped alpha-beta neurons).
"""

from __future__ import annotations

from collections.abc import Hashable
from dataclasses import dataclass

import numpy as np

from .network import ToyNetwork, class_rank, conv2d, conv2d_transpose, forward


class RuleAssignmentError(ValueError):
    """A rule was asked to handle a layer type it is not defined for."""


@dataclass
class AttributionMap:
    values: np.ndarray  # (h, w)
    sample_id: Hashable = None
    target_class: int = 0
    predicted_rank_of_true_label: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"attribution map must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attribution map contains non-finite values")

    @property
    def shape(self):
        return self.values.shape


def _stabilize(z, epsilon):
    # sign(0) counts as +1
    return z + epsilon * np.where(z >= 0, 1.0, -1.0)


def _safe_ratio(r, z):
    out = np.zeros_like(r, dtype=np.float64)
    np.divide(r, z, out=out, where=z > 0)
    return out


def lrp_epsilon(layer, lower_activations, upper_relevance, epsilon=1e-6):
    """Epsilon rule ``R_j = sum_k a_j w_jk / (z_k + eps*sign(z_k)) R_k`` for dense
    or convolution layers."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    a = np.asarray(lower_activations, dtype=np.float64)
    r = np.asarray(upper_relevance, dtype=np.float64)
    if layer.kind == "dense":
        z = a @ layer.weight
        s = r / _stabilize(z, epsilon)
        return a * (s @ layer.weight.T)
    if layer.kind == "conv":
        z = conv2d(a, layer.weight, layer.padding)
        s = r / _stabilize(z, epsilon)
        return a * conv2d_transpose(s, layer.weight, a.shape[2:], layer.padding)
    raise RuleAssignmentError(f"epsilon rule undefined for {layer.kind!r} layers")


def lrp_alphabeta(layer, lower_activations, upper_relevance, alpha=1.0):
    """Alpha-beta rule with ``beta = alpha - 1``.

    Upper neurons without any positive (or negative, for the beta part)
    contribution drop their relevance; there is no renormalization.
    """
    beta = alpha - 1.0
    a = np.asarray(lower_activations, dtype=np.float64)
    r = np.asarray(upper_relevance, dtype=np.float64)
    wp, wn = np.maximum(layer.weight, 0.0), np.minimum(layer.weight, 0.0)
    ap, an = np.maximum(a, 0.0), np.minimum(a, 0.0)

    if layer.kind == "dense":

        def fwd(x, w):
            return x @ w

        def bwd(s, w):
            return s @ w.T

    elif layer.kind == "conv":

        def fwd(x, w):
            return conv2d(x, w, layer.padding)

        def bwd(s, w):
            return conv2d_transpose(s, w, a.shape[2:], layer.padding)

    else:
        raise RuleAssignmentError(f"alpha-beta rule undefined for {layer.kind!r} layers")

    zp = fwd(ap, wp) + fwd(an, wn)
    out = alpha * (ap * bwd(_safe_ratio(r, zp), wp) + an * bwd(_safe_ratio(r, zp), wn))
    if beta:
        zn = fwd(ap, wn) + fwd(an, wp)
        sn = _safe_ratio(r, -zn)
        # contributions a_j w_jk / z_k^- are non-negative fractions
        out = out - beta * -(ap * bwd(sn, wn) + an * bwd(sn, wp))
    return out


def lrp_flat(layer, upper_relevance, in_hw=None):
    """Flat rule: split each upper neuron's relevance equally over its receptive
    field (all input channels, padding excluded)."""
    if layer.kind != "conv":
        raise RuleAssignmentError(f"flat rule requires a convolution, got {layer.kind!r}")
    r = np.asarray(upper_relevance, dtype=np.float64)
    kh, kw = layer.weight.shape[2:]
    if in_hw is None:
        p = layer.padding
        in_hw = (r.shape[2] + kh - 1 - 2 * p, r.shape[3] + kw - 1 - 2 * p)
    ones = np.ones((1, layer.weight.shape[1]) + tuple(in_hw))
    wones = np.ones_like(layer.weight)
    counts = conv2d(ones, wones, layer.padding)  # receptive-field sizes per upper neuron
    # neurons that see only padding have nowhere to send relevance; it is dropped
    share = np.divide(r, counts, out=np.zeros(np.broadcast_shapes(r.shape, counts.shape)), where=counts > 0)
    return conv2d_transpose(share, wones, in_hw, layer.padding)


def lrp_maxpool(layer, lower_activations, upper_relevance):
    """Winner-take-all: relevance goes to the first maximal input of each window."""
    x = np.asarray(lower_activations, dtype=np.float64)
    win = layer.windows(x)
    b, c, oh, ow, _ = win.shape
    sh, sw = layer.size
    g = np.zeros_like(win)
    np.put_along_axis(g, np.argmax(win, axis=-1)[..., None], upper_relevance[..., None], axis=-1)
    g = g.reshape(b, c, oh, ow, sh, sw).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh * sh, ow * sw)
    out = np.zeros_like(x)
    out[:, :, : oh * sh, : ow * sw] = g
    return out


def lrp_relevance(net: ToyNetwork, x, target_class, epsilon=1e-6):
    """Input-space relevance ``(batch, c, h, w)`` for the given target class(es).

    The output relevance is the target logit (one-hot masked logits).
    """
    single = np.asarray(x).shape == net.input_shape
    acts, logits = forward(net, x)
    if single:
        acts = [a[None] for a in acts]
        logits = logits[None]
    n = len(logits)
    target = np.broadcast_to(np.asarray(target_class), (n,))
    if target.min() < 0 or target.max() >= net.num_classes:
        raise ValueError(f"target_class must lie in [0, {net.num_classes})")
    convs = net.conv_indices()
    lowest = convs[0] if convs else None

    r = np.zeros_like(logits)
    r[np.arange(n), target] = logits[np.arange(n), target]
    for i in range(len(net.layers) - 1, -1, -1):
        layer, a = net.layers[i], acts[i]
        if layer.kind == "dense":
            r = lrp_epsilon(layer, a, r, epsilon)
        elif layer.kind == "conv":
            r = lrp_flat(layer, r, a.shape[2:]) if i == lowest else lrp_alphabeta(layer, a, r, 1.0)
        elif layer.kind == "maxpool":
            r = lrp_maxpool(layer, a, r)
        elif layer.kind == "flatten":
            r = r.reshape(a.shape)
        # relu: identity
    return r[0] if single else r


def lrp_composite(net: ToyNetwork, x, target_class, epsilon=1e-6, sample_id=None, true_label=None):
    """Single-image attribution summed over colour channels."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ValueError(f"expected one image of shape {net.input_shape}, got {x.shape}")
    rel = lrp_relevance(net, x, target_class, epsilon)
    label = target_class if true_label is None else true_label
    _, logits = forward(net, x)
    return AttributionMap(
        rel.sum(axis=0),
        sample_id=sample_id,
        target_class=int(target_class),
        predicted_rank_of_true_label=int(class_rank(logits, label)[0]),
    )


def attribute_batch(net, images, labels, target="true", epsilon=1e-6, sample_ids=None, batch_size=256):
    """Attribution maps for a labelled image set.

    ``target`` selects the explained class: ``"true"`` (the label) or
    ``"predicted"`` (the arg-max logit).
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if sample_ids is None:
        sample_ids = list(range(len(images)))
    maps = []
    for start in range(0, len(images), batch_size):
        xb = images[start : start + batch_size]
        yb = labels[start : start + batch_size]
        _, logits = forward(net, xb)
        if target == "true":
            tgt = yb
        elif target == "predicted":
            tgt = logits.argmax(axis=1)
        else:
            raise ValueError(f"target must be 'true' or 'predicted', got {target!r}")
        rel = lrp_relevance(net, xb, tgt, epsilon).sum(axis=1)
        ranks = class_rank(logits, yb)
        for j in range(len(xb)):
            maps.append(
                AttributionMap(rel[j], sample_ids[start + j], int(tgt[j]), int(ranks[j]))
            )
    return maps


def sum_pool_grid(amap: AttributionMap, grid) -> AttributionMap:
    """Sum-pool a map onto a ``(gh, gw)`` grid; the last row/column of cells
    absorbs the remainder."""
    gh, gw = grid
    h, w = amap.values.shape
    if not (1 <= gh <= h and 1 <= gw <= w):
        raise ValueError(f"grid {grid} must fit inside map of shape {(h, w)}")
    rows = np.arange(gh) * (h // gh)
    cols = np.arange(gw) * (w // gw)
    pooled = np.add.reduceat(np.add.reduceat(amap.values, rows, axis=0), cols, axis=1)
    return AttributionMap(pooled, amap.sample_id, amap.target_class, amap.predicted_rank_of_true_label)


__all__ = [
    "AttributionMap",
    "RuleAssignmentError",
    "attribute_batch",
    "lrp_alphabeta",
    "lrp_composite",
    "lrp_epsilon",
    "lrp_flat",
    "lrp_maxpool",
    "lrp_relevance",
    "sum_pool_grid",
]
