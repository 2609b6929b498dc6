"""Small numpy classifiers: layer types, forward pass and seeded initialization.

Networks are batched over a leading sample axis. Images are ``(batch, c, h, w)``.
No softmax lives inside a network; :func:`softmax` is applied externally.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Input or layer shapes do not compose."""


# --------------------------------------------------------------------------- layers


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    kind: str = field(default="dense", init=False)

    def out_shape(self, in_shape):
        if in_shape != (self.weight.shape[0],):
            raise ShapeError(f"dense expects ({self.weight.shape[0]},), got {in_shape}")
        return (self.weight.shape[1],)

    def forward(self, x):
        return x @ self.weight + self.bias


@dataclass
class Conv2D:
    weight: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray  # (out_c,)
    padding: int = 0
    kind: str = field(default="conv", init=False)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.weight.shape[1]:
            raise ShapeError(f"conv expects ({self.weight.shape[1]}, h, w), got {in_shape}")
        _, h, w = in_shape
        kh, kw = self.weight.shape[2:]
        oh, ow = h + 2 * self.padding - kh + 1, w + 2 * self.padding - kw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"kernel {kh}x{kw} larger than padded input {in_shape}")
        return (self.weight.shape[0], oh, ow)

    def forward(self, x):
        return conv2d(x, self.weight, self.padding) + self.bias[None, :, None, None]


@dataclass
class ReLU:
    kind: str = field(default="relu", init=False)

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return np.maximum(x, 0.0)


@dataclass
class MaxPool2D:
    size: tuple[int, int] = (2, 2)
    kind: str = field(default="maxpool", init=False)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool expects (c, h, w), got {in_shape}")
        c, h, w = in_shape
        sh, sw = self.size
        if h < sh or w < sw:
            raise ShapeError(f"pool window {self.size} larger than {in_shape}")
        return (c, h // sh, w // sw)

    def windows(self, x):
        """Non-overlapping windows as ``(b, c, oh, ow, sh*sw)``; trailing rows/cols dropped."""
        b, c, h, w = x.shape
        sh, sw = self.size
        oh, ow = h // sh, w // sw
        v = x[:, :, : oh * sh, : ow * sw].reshape(b, c, oh, sh, ow, sw)
        return v.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, sh * sw)

    def forward(self, x):
        return self.windows(x).max(axis=-1)


@dataclass
class Flatten:
    kind: str = field(default="flatten", init=False)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)


Layer = Dense | Conv2D | ReLU | MaxPool2D | Flatten


# --------------------------------------------------------------------------- conv helpers


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def im2col(x, kh, kw, padding):
    """Patches of ``x`` as ``(b, oh, ow, c*kh*kw)``."""
    win = sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))
    b, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh, ow, c * kh * kw)


def conv2d(x, weight, padding=0):
    """Stride-1 cross-correlation without bias."""
    oc, _, kh, kw = weight.shape
    cols = im2col(x, kh, kw, padding)
    out = cols @ weight.reshape(oc, -1).T
    return out.transpose(0, 3, 1, 2)


def conv2d_transpose(g, weight, in_hw, padding=0):
    """Adjoint of :func:`conv2d` w.r.t. its input (the input-gradient map)."""
    b, oc, oh, ow = g.shape
    _, ic, kh, kw = weight.shape
    h, w = in_hw
    dcols = (g.transpose(0, 2, 3, 1) @ weight.reshape(oc, -1)).reshape(b, oh, ow, ic, kh, kw)
    out = np.zeros((b, ic, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + oh, j : j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


# --------------------------------------------------------------------------- network


@dataclass
class ToyNetwork:
    layers: list
    input_shape: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shapes = self.layer_shapes()
        if not self.layers or self.layers[-1].kind != "dense":
            raise ShapeError("network must end with a dense layer")
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"terminal layer width {shapes[-1]} != num_classes {self.num_classes}")

    def layer_shapes(self):
        """Per-sample shapes: input shape followed by each layer's output shape."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        return shapes

    def conv_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv"]

    def copy(self):
        return copy.deepcopy(self)

    def parameters(self):
        """Trainable arrays in a fixed order (weight, bias per parametric layer)."""
        out = []
        for layer in self.layers:
            if layer.kind in ("dense", "conv"):
                out.extend([layer.weight, layer.bias])
        return out


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], True
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")
    return x, False


def forward(net: ToyNetwork, x):
    """Run the network, returning ``(activations, logits)``.

    ``activations[0]`` is the input and ``activations[i + 1]`` the output of
    layer ``i``; the last entry equals ``logits``. A single unbatched image
    gives unbatched outputs.
    """
    xb, single = _as_batch(net, x)
    acts = [xb]
    for layer in net.layers:
        acts.append(layer.forward(acts[-1]))
    if single:
        acts = [a[0] for a in acts]
    return acts, acts[-1]


def predict_logits(net, x, batch_size=512):
    xb, single = _as_batch(net, x)
    out = []
    for start in range(0, len(xb), batch_size):
        h = xb[start : start + batch_size]
        for layer in net.layers:
            h = layer.forward(h)
        out.append(h)
    logits = np.concatenate(out) if out else np.zeros((0, net.num_classes))
    return logits[0] if single else logits


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_rank(logits, cls):
    """1-based rank of ``cls`` under descending logits (ties count against it)."""
    logits = np.atleast_2d(logits)
    target = logits[np.arange(len(logits)), np.broadcast_to(cls, (len(logits),))]
    return 1 + (logits > target[:, None]).sum(axis=1)


# --------------------------------------------------------------------------- init


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def make_mlp(input_shape, num_classes, hidden=(128, 64), seed=0):
    """MLP ``flatten -> dense(128) -> relu -> dense(64) -> relu -> dense(C)``."""
    rng = np.random.default_rng(seed)
    layers = [Flatten()]
    width = int(np.prod(input_shape))
    for h in hidden:
        layers += [Dense(_uniform(rng, (width, h), width), np.zeros(h)), ReLU()]
        width = h
    layers.append(Dense(_uniform(rng, (width, num_classes), width), np.zeros(num_classes)))
    return ToyNetwork(layers, input_shape, num_classes)


def make_cnn(input_shape, num_classes, channels=(8, 16), seed=0):
    """CNN ``conv3x3(8) relu pool2 conv3x3(16) relu pool2 flatten dense(C)``, same padding."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers = []
    for oc in channels:
        fan_in = c * 9
        layers += [
            Conv2D(_uniform(rng, (oc, c, 3, 3), fan_in), np.zeros(oc), padding=1),
            ReLU(),
            MaxPool2D((2, 2)),
        ]
        c, h, w = oc, h // 2, w // 2
    width = c * h * w
    layers += [Flatten(), Dense(_uniform(rng, (width, num_classes), width), np.zeros(num_classes))]
    return ToyNetwork(layers, input_shape, num_classes)


ARCHITECTURES = {"mlp": make_mlp, "cnn": make_cnn}


def make_network(arch, input_shape, num_classes, seed=0):
    try:
        builder = ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}") from None
    return builder(tuple(input_shape), num_classes, seed=seed)
