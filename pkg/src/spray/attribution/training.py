"""Minibatch SGD with momentum for :class:`ToyNetwork`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ToyNetwork, conv2d_transpose, im2col, predict_logits, softmax


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def _backward(net, acts, grad):
    """Parameter gradients (same order as ``net.parameters()``) for one batch."""
    grads = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer, x = net.layers[i], acts[i]
        if layer.kind == "dense":
            grads.append(grad.sum(axis=0))
            grads.append(x.T @ grad)
            if i:
                grad = grad @ layer.weight.T
        elif layer.kind == "conv":
            oc, _, kh, kw = layer.weight.shape
            cols = im2col(x, kh, kw, layer.padding)
            g2 = grad.transpose(0, 2, 3, 1).reshape(-1, oc)
            grads.append(grad.sum(axis=(0, 2, 3)))
            grads.append((g2.T @ cols.reshape(-1, cols.shape[-1])).reshape(layer.weight.shape))
            if i:
                grad = conv2d_transpose(grad, layer.weight, x.shape[2:], layer.padding)
        elif layer.kind == "relu":
            grad = grad * (x > 0)
        elif layer.kind == "maxpool":
            win = layer.windows(x)
            hit = np.argmax(win, axis=-1)
            b, c, oh, ow, _ = win.shape
            sh, sw = layer.size
            g = np.zeros_like(win)
            np.put_along_axis(g, hit[..., None], grad[..., None], axis=-1)
            g = g.reshape(b, c, oh, ow, sh, sw).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh * sh, ow * sw)
            full = np.zeros_like(x)
            full[:, :, : oh * sh, : ow * sw] = g
            grad = full
        elif layer.kind == "flatten":
            grad = grad.reshape(x.shape)
    return grads[::-1]


def loss_and_grads(net: ToyNetwork, x, y):
    """Mean softmax cross-entropy and its parameter gradients."""
    acts = [x]
    for layer in net.layers:
        acts.append(layer.forward(acts[-1]))
    p = softmax(acts[-1])
    n = len(y)
    loss = -np.log(p[np.arange(n), y] + 1e-300).mean()
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    return loss, _backward(net, acts, g / n)


def _check_dataset(net, images, labels):
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    if images.shape[1:] != net.input_shape:
        raise ValueError(f"image shape {images.shape[1:]} != network input {net.input_shape}")
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError(f"labels must lie in [0, {net.num_classes})")
    return images, labels.astype(np.int64)


def train_sgd(net: ToyNetwork, images, labels, cfg: TrainConfig, callback=None) -> ToyNetwork:
    """Train a copy of ``net``; the input network is left untouched.

    Batches are drawn from a permutation seeded by ``cfg.seed``, so identical
    inputs give bit-identical weights. ``callback(epoch, net)`` runs after each
    epoch (1-based).
    """
    images, labels = _check_dataset(net, images, labels)
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    velocity = [np.zeros_like(p) for p in params]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(images))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = loss_and_grads(net, images[idx], labels[idx])
            for p, g, v in zip(params, grads, velocity):
                if cfg.weight_decay and p.ndim > 1:
                    g = g + cfg.weight_decay * p
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p += v
        if callback is not None:
            callback(epoch, net)
    return net


def accuracy(net, images, labels, batch_size=512):
    logits = predict_logits(net, np.asarray(images, dtype=np.float64), batch_size)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())
