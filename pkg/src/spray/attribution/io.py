"""File formats for attribution batches, sample metadata and network checkpoints.

ATR1 (attribution batch)::

    b"ATR1" | u32 n | u32 h | u32 w | n*h*w float32      (all little-endian,
                                                         row-major, sample order)

Checkpoint (``SPNN`` version 1)::

    b"SPNN" | u32 version | u32 header_len | header (UTF-8 JSON) | payload

The JSON header holds ``input_shape``, ``num_classes`` and one descriptor per
layer (``{"kind": ..., ...}``; parametric layers list their array shapes). The
payload is every weight then bias array, in layer order, as little-endian
float64 in C order.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .lrp import AttributionMap
from .network import Conv2D, Dense, Flatten, MaxPool2D, ReLU, ToyNetwork

ATR_MAGIC = b"ATR1"
CKPT_MAGIC = b"SPNN"
CKPT_VERSION = 1
METADATA_HEADER = ["sample_id", "class_id", "predicted_class", "true_label_rank"]


class FormatError(ValueError):
    """A file does not follow its declared binary layout."""


def write_atr(path, maps):
    maps = list(maps)
    if not maps:
        raise ValueError("no attribution maps to write")
    h, w = maps[0].values.shape
    if any(m.values.shape != (h, w) for m in maps):
        raise ValueError("all maps in an ATR1 file must share one shape")
    data = np.stack([m.values for m in maps]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(ATR_MAGIC + struct.pack("<III", len(maps), h, w))
        fh.write(data.tobytes(order="C"))


def read_atr(path):
    """Return the maps stored in an ATR1 file as an ``(n, h, w)`` float64 array."""
    raw = Path(path).read_bytes()
    if raw[:4] != ATR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    n, h, w = struct.unpack_from("<III", raw, 4)
    body = raw[16:]
    if len(body) != 4 * n * h * w:
        raise FormatError(f"{path}: expected {4 * n * h * w} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(n, h, w).astype(np.float64)


def write_metadata(path, rows):
    """``rows`` are ``(sample_id, class_id, predicted_class, true_label_rank)`` tuples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METADATA_HEADER)
        for row in rows:
            writer.writerow(row)


def read_metadata(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METADATA_HEADER:
            raise FormatError(f"{path}: header must be {','.join(METADATA_HEADER)}")
        return [
            (r["sample_id"], int(r["class_id"]), int(r["predicted_class"]), int(r["true_label_rank"]))
            for r in reader
        ]


def maps_from_array(values, metadata):
    return [
        AttributionMap(v, sample_id=sid, target_class=cls, predicted_rank_of_true_label=rank)
        for v, (sid, cls, _, rank) in zip(values, metadata)
    ]


# --------------------------------------------------------------------------- checkpoints


def _describe(layer):
    if layer.kind == "dense":
        return {"kind": "dense", "weight": list(layer.weight.shape)}
    if layer.kind == "conv":
        return {"kind": "conv", "weight": list(layer.weight.shape), "padding": layer.padding}
    if layer.kind == "maxpool":
        return {"kind": "maxpool", "size": list(layer.size)}
    return {"kind": layer.kind}


def save_checkpoint(net: ToyNetwork, path):
    header = json.dumps(
        {
            "input_shape": list(net.input_shape),
            "num_classes": net.num_classes,
            "layers": [_describe(layer) for layer in net.layers],
        },
        sort_keys=True,
    ).encode()
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.parameters())
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header + payload)


def load_checkpoint(path) -> ToyNetwork:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a network checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen])
    offset = 12 + hlen

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        return arr.astype(np.float64)

    layers = []
    for desc in header["layers"]:
        kind = desc["kind"]
        if kind == "dense":
            shape = tuple(desc["weight"])
            layers.append(Dense(take(shape), take((shape[1],))))
        elif kind == "conv":
            shape = tuple(desc["weight"])
            layers.append(Conv2D(take(shape), take((shape[0],)), padding=desc["padding"]))
        elif kind == "maxpool":
            layers.append(MaxPool2D(tuple(desc["size"])))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise FormatError(f"{path}: unknown layer kind {kind!r}")
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return ToyNetwork(layers, tuple(header["input_shape"]), header["num_classes"])
