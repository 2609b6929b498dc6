"""Artifact addition/removal studies and the retraining ("un-Hans") experiment."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..attribution import (
    ToyNetwork,
    TrainConfig,
    accuracy,
    attribute_batch,
    class_rank,
    predict_logits,
    softmax,
    train_sgd,
)
from .artifacts import ArtifactMask, inject, relevance_mass_fraction, remove

ABLATION_HEADER = ["sample_id", "rank_before", "rank_after", "prob_before", "prob_after"]


@dataclass
class AblationResult:
    per_sample: list  # (sample_id, rank_before, rank_after, prob_before, prob_after)
    artifact_class: int

    @property
    def n_samples(self):
        return len(self.per_sample)

    @property
    def mean_delta_rank(self):
        # positive = moved toward the artifact class
        return float(np.mean([rb - ra for _, rb, ra, _, _ in self.per_sample]))

    @property
    def mean_delta_prob(self):
        return float(np.mean([pa - pb for _, _, _, pb, pa in self.per_sample]))


def _scores(model, images, cls):
    logits = predict_logits(model, images)
    return class_rank(logits, cls), softmax(logits)[:, cls]


def _study(model, before, after, sample_ids, artifact_class):
    rb, pb = _scores(model, before, artifact_class)
    ra, pa = _scores(model, after, artifact_class)
    rows = [(sid, int(a), int(b), float(c), float(d)) for sid, a, b, c, d in zip(sample_ids, rb, ra, pb, pa)]
    return AblationResult(rows, artifact_class)


def _pick(images, sample_ids, n, seed):
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("empty sample set")
    sample_ids = np.arange(len(images)) if sample_ids is None else np.asarray(sample_ids)
    if n is not None and n < len(images):
        idx = np.sort(np.random.default_rng(seed).choice(len(images), size=n, replace=False))
        images, sample_ids = images[idx], sample_ids[idx]
    return images, sample_ids


def addition_study(model, foreign_images, mask: ArtifactMask, artifact_class, n=2000, seed=0, labels=None, sample_ids=None):
    """Effect of pasting the artifact onto samples of other classes.

    At most ``n`` samples are drawn without replacement (seeded).
    """
    if labels is not None and np.any(np.asarray(labels) == artifact_class):
        raise ValueError("foreign samples must not contain the artifact class")
    images, ids = _pick(foreign_images, sample_ids, n, seed)
    return _study(model, images, inject(images, mask), ids, artifact_class)


def removal_study(
    model, affected_images, mask: ArtifactMask, artifact_class, fill="mean_fill", mean=None, std=None, seed=0, n=None, sample_ids=None
):
    """Effect of filling the artifact region on samples that carry it."""
    images, ids = _pick(affected_images, sample_ids, n, seed)
    return _study(model, images, remove(images, mask, fill, mean, std, seed), ids, artifact_class)


def write_ablation_csv(path, result: AblationResult):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(ABLATION_HEADER)
        for sid, rb, ra, pb, pa in result.per_sample:
            out.writerow([sid, rb, ra, repr(pb), repr(pa)])


def read_ablation_csv(path, artifact_class=0):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ABLATION_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return AblationResult([(r[0], int(r[1]), int(r[2]), float(r[3]), float(r[4])) for r in rows[1:]], artifact_class)


# --------------------------------------------------------------------------- controls


def blind_to_mask(net: ToyNetwork, mask: ArtifactMask):
    """Copy of a flatten-then-dense network whose first dense layer ignores
    every input pixel on the artifact support."""
    kinds = [layer.kind for layer in net.layers]
    if kinds[:2] != ["flatten", "dense"]:
        raise ValueError("blinding needs a network starting with flatten -> dense")
    if mask.image_shape != net.input_shape:
        raise ValueError("mask does not match the network input")
    out = net.copy()
    hit = np.broadcast_to(mask.support, net.input_shape).ravel()
    out.layers[1].weight[hit] = 0.0
    return out


def train_blind_control(images, labels, mask: ArtifactMask, cfg: TrainConfig, num_classes, arch_seed=0):
    """MLP trained with the artifact support zeroed and then blinded, so its
    outputs cannot depend on those pixels."""
    from ..attribution import make_mlp

    images = np.asarray(images, dtype=np.float64).copy()
    images[..., mask.support] = 0.0
    net = make_mlp(images.shape[1:], num_classes, seed=arch_seed)
    return blind_to_mask(train_sgd(net, images, labels, cfg), mask)


# --------------------------------------------------------------------------- un-Hans


@dataclass
class UnhansRecord:
    accuracy: dict  # (model, split) -> accuracy, model in {"A", "B"}, split in {"val_A", "val_B"}
    relevance_mass: dict = field(default_factory=dict)  # model -> {epoch: mean fraction}
    epochs: int = 0

    def matrix(self):
        return np.array([[self.accuracy[(m, s)] for s in ("val_A", "val_B")] for m in ("A", "B")])


def _mass(net, images, labels, mask):
    if len(images) == 0:
        return 0.0
    maps = attribute_batch(net, images, labels)
    return float(np.mean([relevance_mass_fraction(a, mask) for a in maps]))


def unhans_experiment(base_model, dataset, artifact_class, mask: ArtifactMask, cfg: TrainConfig, checkpoints=(1, 5, 10)):
    """Fine-tune ``base_model`` on subset A (as given) and on subset B (artifact
    pasted onto every training sample), then score both on validation A (as
    given) and validation B (artifact on every sample).

    Relevance-mass fractions are tracked on the artifact-class samples of
    validation B after the listed epochs (epoch 0 = base model).
    """
    train_a, labels = dataset.images, dataset.labels
    train_b = inject(train_a, mask)
    val_a, val_labels = dataset.val_images, dataset.val_labels
    val_b = inject(val_a, mask)
    probe = val_labels == artifact_class
    probe_x, probe_y = val_b[probe], val_labels[probe]

    record = UnhansRecord({}, {}, cfg.epochs)
    models = {}
    for name, train in (("A", train_a), ("B", train_b)):
        series = {0: _mass(base_model, probe_x, probe_y, mask)}

        def track(epoch, net, series=series):
            if epoch in checkpoints:
                series[epoch] = _mass(net, probe_x, probe_y, mask)

        models[name] = train_sgd(base_model, train, labels, cfg, callback=track)
        record.relevance_mass[name] = series
    for name, net in models.items():
        record.accuracy[(name, "val_A")] = accuracy(net, val_a, val_labels)
        record.accuracy[(name, "val_B")] = accuracy(net, val_b, val_labels)
    return record


def write_unhans_csv(path, record: UnhansRecord):
    """2x2 accuracy block followed by the relevance-mass series."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["model", "val_A", "val_B"])
        for m in ("A", "B"):
            out.writerow([m, repr(record.accuracy[(m, "val_A")]), repr(record.accuracy[(m, "val_B")])])
        out.writerow([])
        out.writerow(["model", "epoch", "relevance_mass_fraction"])
        for m in ("A", "B"):
            for epoch, v in sorted(record.relevance_mass[m].items()):
                out.writerow([m, epoch, repr(v)])
