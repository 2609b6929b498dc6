import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spray.ablation import (
    ABLATION_HEADER,
    AblationResult,
    ArtifactMask,
    GeneratorParams,
    PoisonedDataset,
    addition_study,
    blind_to_mask,
    build_poisoned_dataset,
    channel_stats,
    inject,
    make_artifact,
    read_ablation_csv,
    relevance_mass_fraction,
    removal_study,
    remove,
    train_blind_control,
    unhans_experiment,
    write_ablation_csv,
    write_unhans_csv,
)
from spray.attribution import TrainConfig, make_mlp

SMALL = GeneratorParams(n_train=20, n_val=6)


def corner_predicate(h, w, r):
    """Per-pixel check: inside an r-square corner and outside the quarter disc."""
    out = np.zeros((h, w), bool)
    for i in range(h):
        for j in range(w):
            for ci, cj in ((r, r), (r, w - r), (h - r, r), (h - r, w - r)):
                in_square = (i < r or i >= h - r) and (j < r or j >= w - r)
                near = abs(i + 0.5 - ci) <= r and abs(j + 0.5 - cj) <= r
                if in_square and near and (i + 0.5 - ci) ** 2 + (j + 0.5 - cj) ** 2 > r * r:
                    out[i, j] = True
    return out


# --------------------------------------------------------------------------- artifacts


def test_border_frame_count():
    m = make_artifact("border", {"width": 2})
    assert int((m.alpha > 0).sum()) == 208
    assert np.all(m.alpha[2:-2, 2:-2] == 0)


@pytest.mark.parametrize("r", [1, 2, 4, 7])
def test_rounded_corners_match_predicate(r):
    m = make_artifact("rounded_corners", {"radius": r})
    np.testing.assert_array_equal(m.support, corner_predicate(28, 28, r))


def test_watermark_bottom_left():
    m = make_artifact("watermark", {"size": (3, 3)})
    rows, cols = np.nonzero(m.support)
    assert set(rows) == {25, 26, 27} and set(cols) == {0, 1, 2} and m.support.sum() == 9


def test_pasted_pattern_seeded_inside_region():
    a = make_artifact("pasted_pattern", {"region": (10, 20, 5, 15)}, seed=4)
    b = make_artifact("pasted_pattern", {"region": (10, 20, 5, 15)}, seed=4)
    assert np.array_equal(a.alpha, b.alpha) and np.array_equal(a.pattern, b.pattern)
    rows, cols = np.nonzero(a.support)
    assert rows.min() >= 10 and rows.max() < 20 and cols.min() >= 5 and cols.max() < 15


@pytest.mark.parametrize(
    "kind,params",
    [
        ("border", {"width": 0}),
        ("border", {"width": 15}),
        ("rounded_corners", {"radius": 0}),
        ("watermark", {"size": (29, 2)}),
        ("pasted_pattern", {"size": (6, 6), "region": (0, 5, 0, 28)}),
        ("watermark", {"colour": 1}),
        ("sticker", {}),
    ],
)
def test_make_artifact_errors(kind, params):
    with pytest.raises(ValueError):
        make_artifact(kind, params)


def test_mask_validation():
    with pytest.raises(ValueError):
        ArtifactMask(np.zeros((1, 4, 4)), np.full((4, 4), 1.5), "watermark")
    with pytest.raises(ValueError):
        ArtifactMask(np.full((1, 4, 4), 2.0), np.zeros((4, 4)), "border")


# --------------------------------------------------------------------------- inject / remove


def test_inject_cases():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(1, 28, 28))
    zero = ArtifactMask(np.ones((1, 28, 28)), np.zeros((28, 28)), "watermark")
    assert np.array_equal(inject(img, zero), img)
    m = make_artifact("watermark", {"value": 0.7})
    out = inject(img, m)
    assert np.all(out[:, m.support] == 0.7) and np.array_equal(out[:, ~m.support], img[:, ~m.support])
    assert np.array_equal(inject(out, m), out)
    half = ArtifactMask(img, np.full((28, 28), 0.5), "watermark")
    np.testing.assert_allclose(inject(img, half), img, atol=1e-15)
    with pytest.raises(ValueError):
        inject(np.zeros((1, 27, 27)), m)


def test_remove_cases():
    m = make_artifact("watermark")
    const = np.full((1, 28, 28), 0.3)
    assert np.array_equal(remove(inject(const, m), m, mean=[0.3], std=[0.1]), const)
    zero = ArtifactMask(np.zeros((1, 28, 28)), np.zeros((28, 28)), "watermark")
    imgs = np.random.default_rng(1).uniform(size=(5, 1, 28, 28))
    assert np.array_equal(remove(imgs, zero), imgs)
    with pytest.raises(ValueError):
        remove(imgs, m, fill="inpaint")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["watermark", "border", "rounded_corners", "pasted_pattern"]))
def test_inject_remove_roundtrip(seed, kind):
    rng = np.random.default_rng(seed)
    m = make_artifact(kind, seed=seed)
    x = rng.uniform(size=(4, 1, 28, 28))
    mean, std = channel_stats(x)
    back = remove(inject(x, m), m, "mean_fill", mean, std)
    # per-pixel oracle: fill on the support, untouched elsewhere
    for img, orig in zip(back, x):
        for i in range(28):
            for j in range(28):
                expect = mean[0] if m.alpha[i, j] > 0 else orig[0, i, j]
                assert img[0, i, j] == expect
    noisy = remove(x, m, "noise_fill", mean, std, seed=seed)
    assert np.array_equal(noisy, remove(x, m, "noise_fill", mean, std, seed=seed))
    assert np.array_equal(noisy[..., ~m.support], x[..., ~m.support])


# --------------------------------------------------------------------------- relevance mass


def test_relevance_mass_cases():
    m = make_artifact("watermark")
    inside = np.where(m.support, 1.0, 0.0)
    assert relevance_mass_fraction(inside, m) == 1.0
    assert relevance_mass_fraction(np.zeros((28, 28)), m) == 0.0
    assert relevance_mass_fraction(-np.ones((28, 28)), m) == 0.0
    tenth = ArtifactMask(np.zeros((1, 10, 10)), np.zeros((10, 10)), "watermark")
    tenth.alpha[0] = 1.0
    assert abs(relevance_mass_fraction(np.ones((10, 10)), tenth) - 0.1) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_relevance_mass_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = make_artifact("rounded_corners", {"radius": int(rng.integers(1, 10))})
    r = rng.normal(size=(28, 28))
    inside = total = 0.0
    for i in range(28):
        for j in range(28):
            if r[i, j] > 0:
                total += r[i, j]
                if m.alpha[i, j] > 0:
                    inside += r[i, j]
    assert abs(relevance_mass_fraction(r, m) - inside / total) < 1e-12


# --------------------------------------------------------------------------- dataset


def test_poison_flag_counts():
    m = make_artifact("watermark")
    d0 = build_poisoned_dataset(SMALL, 0.0, m)
    assert not d0.poisoned.any() and not d0.val_poisoned.any()
    d1 = build_poisoned_dataset(SMALL, 1.0, m)
    assert np.array_equal(d1.poisoned, d1.labels == 0)
    d = build_poisoned_dataset(GeneratorParams(n_train=100, n_val=10), 0.2, m, seed=3)
    assert d.poisoned.sum() == 20 and np.all(d.labels[d.poisoned] == 0)
    flagged = d.images[d.poisoned]
    assert np.all(flagged[..., m.support] == 1.0)
    with pytest.raises(ValueError):
        build_poisoned_dataset(SMALL, 1.5, m)


def test_dataset_deterministic_and_saves(tmp_path):
    m = make_artifact("watermark")
    a = build_poisoned_dataset(SMALL, 0.5, m, seed=9)
    b = build_poisoned_dataset(SMALL, 0.5, m, seed=9)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.poisoned, b.poisoned)
    assert a.images.min() >= 0 and a.images.max() <= 1
    a.save(tmp_path / "d.npz")
    c = PoisonedDataset.load(tmp_path / "d.npz")
    assert np.array_equal(c.images, a.images) and np.array_equal(c.val_poisoned, a.val_poisoned)
    assert c.class_names == a.class_names


# --------------------------------------------------------------------------- studies


@pytest.fixture(scope="module")
def blind():
    m = make_artifact("watermark")
    net = blind_to_mask(make_mlp((1, 28, 28), 5, seed=0), m)
    return net, m


def test_blind_model_zero_effect(blind):
    net, m = blind
    d = build_poisoned_dataset(SMALL, 1.0, m)
    foreign = d.val_labels != 0
    add = addition_study(net, d.val_images[foreign], m, 0, labels=d.val_labels[foreign])
    rem = removal_study(net, d.val_images[d.val_poisoned], m, 0)
    for res in (add, rem):
        assert res.mean_delta_rank == 0 and abs(res.mean_delta_prob) < 1e-12


def test_study_counts_and_errors(blind):
    net, m = blind
    x = np.random.default_rng(0).uniform(size=(7, 1, 28, 28))
    res = addition_study(net, x, m, 2, n=2000)
    assert res.n_samples == 7
    assert addition_study(net, x, m, 2, n=3).n_samples == 3
    assert all(1 <= rb <= 5 and 1 <= ra <= 5 for _, rb, ra, _, _ in res.per_sample)
    with pytest.raises(ValueError):
        removal_study(net, np.zeros((0, 1, 28, 28)), m, 0)
    with pytest.raises(ValueError):
        addition_study(net, x, m, 0, labels=np.array([0, 1, 1, 1, 1, 1, 1]))


def test_means_recompute_and_csv(tmp_path):
    rng = np.random.default_rng(5)
    rows = [(i, int(rng.integers(1, 6)), int(rng.integers(1, 6)), rng.uniform(), rng.uniform()) for i in range(50)]
    res = AblationResult(rows, 0)
    assert abs(res.mean_delta_rank - np.mean([r[1] - r[2] for r in rows])) < 1e-12
    assert abs(res.mean_delta_prob - np.mean([r[4] - r[3] for r in rows])) < 1e-12
    write_ablation_csv(tmp_path / "a.csv", res)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == ",".join(ABLATION_HEADER)
    back = read_ablation_csv(tmp_path / "a.csv")
    assert back.mean_delta_prob == res.mean_delta_prob and back.mean_delta_rank == res.mean_delta_rank


def test_blind_control_ignores_support():
    m = make_artifact("watermark")
    d = build_poisoned_dataset(SMALL, 1.0, m)
    ctl = train_blind_control(d.images, d.labels, m, TrainConfig(epochs=1, seed=0), 5)
    from spray.attribution import predict_logits

    x = d.val_images
    assert np.array_equal(predict_logits(ctl, x), predict_logits(ctl, inject(x, m)))


def test_unhans_zero_epochs(tmp_path):
    m = make_artifact("watermark")
    d = build_poisoned_dataset(SMALL, 1.0, m)
    base = make_mlp((1, 28, 28), 5, seed=1)
    rec = unhans_experiment(base, d, 0, m, TrainConfig(epochs=0))
    acc = rec.matrix()
    assert acc[0, 0] == acc[1, 0] and acc[0, 1] == acc[1, 1]
    assert rec.relevance_mass["A"] == rec.relevance_mass["B"]
    write_unhans_csv(tmp_path / "u.csv", rec)
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "model,val_A,val_B" and lines[4] == "model,epoch,relevance_mass_fraction"
