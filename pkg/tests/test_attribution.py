import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spray.attribution import (
    AttributionMap,
    Conv2D,
    Dense,
    Flatten,
    FormatError,
    MaxPool2D,
    ReLU,
    RuleAssignmentError,
    ShapeError,
    ToyNetwork,
    TrainConfig,
    accuracy,
    attribute_batch,
    forward,
    load_checkpoint,
    lrp_alphabeta,
    lrp_composite,
    lrp_epsilon,
    lrp_flat,
    lrp_maxpool,
    lrp_relevance,
    make_cnn,
    make_mlp,
    read_atr,
    read_metadata,
    save_checkpoint,
    sum_pool_grid,
    train_sgd,
    write_atr,
    write_metadata,
)
from spray.attribution.network import conv2d

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def dense_net(sizes, seed=0, bias=True):
    rng = np.random.default_rng(seed)
    layers = [Flatten()]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(rng.normal(size=(a, b)), rng.normal(size=b) * bias))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return ToyNetwork(layers, (1, 1, sizes[0]), sizes[-1])


# --------------------------------------------------------------------------- forward


def test_identity_dense_logits_equal_input():
    net = ToyNetwork([Flatten(), Dense(np.eye(3), np.zeros(3))], (1, 1, 3), 3)
    x = np.array([[[1.5, -2.0, 0.25]]])
    _, logits = forward(net, x)
    np.testing.assert_array_equal(logits, [1.5, -2.0, 0.25])


def test_zero_weights_give_bias():
    net = ToyNetwork([Flatten(), Dense(np.zeros((4, 2)), np.array([0.3, -1.0]))], (1, 2, 2), 2)
    _, logits = forward(net, np.random.default_rng(0).normal(size=(1, 2, 2)))
    np.testing.assert_array_equal(logits, [0.3, -1.0])


def test_two_layer_matches_hand_arithmetic():
    rng = np.random.default_rng(1)
    w1, b1, w2, b2 = rng.normal(size=(5, 4)), rng.normal(size=4), rng.normal(size=(4, 3)), rng.normal(size=3)
    net = ToyNetwork([Flatten(), Dense(w1, b1), ReLU(), Dense(w2, b2)], (1, 1, 5), 3)
    x = rng.normal(size=(1, 1, 5))
    h = [max(0.0, sum(x[0, 0, i] * w1[i, j] for i in range(5)) + b1[j]) for j in range(4)]
    expected = [sum(h[j] * w2[j, k] for j in range(4)) + b2[k] for k in range(3)]
    _, logits = forward(net, x)
    np.testing.assert_allclose(logits, expected, rtol=1e-12)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        forward(make_mlp((1, 4, 4), 2), np.zeros((1, 5, 5)))


def test_network_shapes_must_compose():
    with pytest.raises(ShapeError):
        ToyNetwork([Flatten(), Dense(np.zeros((3, 2)), np.zeros(2))], (1, 2, 2), 2)
    with pytest.raises(ShapeError):
        ToyNetwork([Flatten(), Dense(np.zeros((4, 3)), np.zeros(3))], (1, 2, 2), 2)


def test_shipped_architectures():
    mlp = make_mlp((1, 28, 28), 5)
    assert [l.kind for l in mlp.layers] == ["flatten", "dense", "relu", "dense", "relu", "dense"]
    assert mlp.layers[1].weight.shape == (784, 128) and mlp.layers[3].weight.shape == (128, 64)
    cnn = make_cnn((1, 28, 28), 5)
    assert [l.kind for l in cnn.layers] == ["conv", "relu", "maxpool", "conv", "relu", "maxpool", "flatten", "dense"]
    _, logits = forward(cnn, np.zeros((2, 1, 28, 28)))
    assert logits.shape == (2, 5)


# --------------------------------------------------------------------------- training


def test_training_separable_blobs():
    from sklearn.linear_model import LogisticRegression

    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-2, 0.5, size=(100, 2)), rng.normal(2, 0.5, size=(100, 2))])
    y = np.repeat([0, 1], 100)
    # the oracle: a linear model separates the set perfectly
    assert LogisticRegression().fit(x, y).score(x, y) == 1.0
    net = train_sgd(make_mlp((1, 1, 2), 2, hidden=(8,)), x[:, None, None, :], y, TrainConfig(0.05, 20, 16, 0))
    assert accuracy(net, x[:, None, None, :], y) >= 0.99


def test_zero_epochs_returns_same_net():
    net = make_mlp((1, 2, 2), 2, hidden=(3,))
    out = train_sgd(net, np.ones((4, 1, 2, 2)), np.array([0, 1, 0, 1]), TrainConfig(epochs=0))
    for a, b in zip(net.layers, out.layers):
        if a.kind == "dense":
            np.testing.assert_array_equal(a.weight, b.weight)


def test_training_is_deterministic():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(40, 1, 4, 4)), rng.integers(0, 3, 40)
    cfg = TrainConfig(0.05, 2, 8, seed=7)
    a = train_sgd(make_mlp((1, 4, 4), 3), x, y, cfg)
    b = train_sgd(make_mlp((1, 4, 4), 3), x, y, cfg)
    for la, lb in zip(a.layers, b.layers):
        if la.kind == "dense":
            np.testing.assert_array_equal(la.weight, lb.weight)


def test_training_errors():
    net = make_mlp((1, 2, 2), 2)
    with pytest.raises(ValueError):
        train_sgd(net, np.zeros((0, 1, 2, 2)), np.zeros(0, int), TrainConfig())
    with pytest.raises(ValueError):
        train_sgd(net, np.zeros((2, 1, 2, 2)), np.array([0, 2]), TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay=-1)


# --------------------------------------------------------------------------- rules


def test_epsilon_single_path():
    layer = Dense(np.array([[3.0]]), np.zeros(1))
    r = lrp_epsilon(layer, np.array([[2.0]]), np.array([[6.0]]), 1e-9)
    assert abs(r[0, 0] - 6.0) / 6.0 < 1e-6


def test_epsilon_zero_denominator_is_stabilized():
    layer = Dense(np.array([[1.0], [-1.0]]), np.zeros(1))
    r = lrp_epsilon(layer, np.array([[1.0, 1.0]]), np.array([[1.0]]), 1.0)
    assert np.all(np.isfinite(r))
    np.testing.assert_allclose(r, [[1.0, -1.0]])


def test_epsilon_matches_formula():
    rng = np.random.default_rng(0)
    w, a, ru = rng.uniform(0.1, 1, (3, 4)), rng.uniform(0.1, 1, (1, 3)), rng.uniform(0, 1, (1, 4))
    r = lrp_epsilon(Dense(w, np.zeros(4)), a, ru, 1e-9)
    expected = np.array([sum(a[0, j] * w[j, k] / (a[0] @ w[:, k] + 1e-9) * ru[0, k] for k in range(4)) for j in range(3)])
    np.testing.assert_allclose(r[0], expected, rtol=1e-12)
    assert abs(r.sum() - ru.sum()) / ru.sum() < 1e-6


def test_epsilon_requires_positive_epsilon():
    with pytest.raises(ValueError):
        lrp_epsilon(Dense(np.ones((1, 1)), np.zeros(1)), np.ones((1, 1)), np.ones((1, 1)), 0.0)


def test_alphabeta_positive_conv_equals_epsilon_limit():
    rng = np.random.default_rng(2)
    layer = Conv2D(rng.uniform(0.1, 1, (3, 2, 3, 3)), np.zeros(3), padding=1)
    a = rng.uniform(0.1, 1, (1, 2, 5, 5))
    ru = rng.uniform(0, 1, (1, 3, 5, 5))
    np.testing.assert_allclose(lrp_alphabeta(layer, a, ru), lrp_epsilon(layer, a, ru, 1e-12), rtol=1e-6, atol=1e-12)


def test_alphabeta_negative_paths_get_nothing():
    layer = Dense(np.array([[1.0], [-1.0]]), np.zeros(1))
    r = lrp_alphabeta(layer, np.array([[1.0, 1.0]]), np.array([[2.0]]))
    np.testing.assert_allclose(r, [[2.0, 0.0]])


def test_alphabeta_zero_relevance():
    rng = np.random.default_rng(0)
    layer = Conv2D(rng.normal(size=(2, 1, 3, 3)), np.zeros(2))
    out = lrp_alphabeta(layer, rng.uniform(size=(1, 1, 6, 6)), np.zeros((1, 2, 4, 4)))
    assert np.all(out == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_alphabeta_conserves_on_active_neurons(seed):
    rng = np.random.default_rng(seed)
    layer = Conv2D(rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
    a = rng.uniform(0, 1, (1, 2, 6, 6))
    ru = rng.uniform(0, 1, (1, 3, 4, 4))
    z_pos = conv2d(a, np.maximum(layer.weight, 0))
    active = z_pos > 0
    out = lrp_alphabeta(layer, a, ru)
    np.testing.assert_allclose(out.sum(), ru[active].sum(), rtol=1e-10)


def test_flat_one_by_one_passes_through():
    layer = Conv2D(np.ones((1, 1, 1, 1)), np.zeros(1))
    r = np.random.default_rng(0).normal(size=(1, 1, 4, 4))
    np.testing.assert_allclose(lrp_flat(layer, r), r)


def test_flat_uniform_split():
    layer = Conv2D(np.ones((1, 1, 3, 3)), np.zeros(1), padding=1)
    r = np.zeros((1, 1, 5, 5))
    r[0, 0, 2, 2] = 9.0
    out = lrp_flat(layer, r, (5, 5))
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0
    np.testing.assert_allclose(out[0, 0], expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 1), st.integers(1, 3))
def test_flat_conserves_exactly(seed, padding, k):
    padding = min(padding, k - 1)  # every receptive field touches the input
    rng = np.random.default_rng(seed)
    layer = Conv2D(rng.normal(size=(2, 3, k, k)), np.zeros(2), padding=padding)
    h = 7
    oh = h + 2 * padding - k + 1
    r = rng.normal(size=(1, 2, oh, oh))
    out = lrp_flat(layer, r, (h, h))
    assert abs(out.sum() - r.sum()) <= 1e-12 * max(1.0, np.abs(r).sum())


def test_flat_padding_only_field_drops_relevance():
    layer = Conv2D(np.ones((1, 1, 1, 1)), np.zeros(1), padding=1)
    out = lrp_flat(layer, np.ones((1, 1, 5, 5)), (3, 3))
    np.testing.assert_array_equal(out, np.ones((1, 1, 3, 3)))


def test_flat_rejects_dense():
    with pytest.raises(RuleAssignmentError):
        lrp_flat(Dense(np.ones((2, 2)), np.zeros(2)), np.ones((1, 2)))


def test_maxpool_winner_takes_all():
    x = np.array([[[[1.0, 3.0, 0.0, 0.0], [2.0, 0.5, 0.0, 0.0], [0.0, 0.0, 5.0, 5.0], [0.0, 4.0, 0.0, 1.0]]]])
    r = np.array([[[[10.0, 1.0], [2.0, 7.0]]]])
    out = lrp_maxpool(MaxPool2D((2, 2)), x, r)
    expected = np.zeros_like(x)
    expected[0, 0, 0, 1] = 10.0  # window max 3
    expected[0, 0, 0, 2] = 1.0  # all-zero window: first position
    expected[0, 0, 3, 1] = 2.0
    expected[0, 0, 2, 2] = 7.0  # tie: first maximal input
    np.testing.assert_array_equal(out, expected)


# --------------------------------------------------------------------------- composite


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_dense_conservation(seed):
    net = dense_net([12, 8, 6, 3], seed, bias=False)
    rng = np.random.default_rng(seed + 1)
    for _ in range(20):
        x = rng.normal(size=(1, 1, 12))
        _, logits = forward(net, x)
        t = int(np.argmax(logits))
        if logits[t] <= 0:
            continue
        amap = lrp_composite(net, x, t, epsilon=1e-9)
        assert abs(amap.values.sum() - logits[t]) / abs(logits[t]) < 1e-4


def test_zero_input_zero_bias_gives_zero_map():
    net = make_cnn((1, 12, 12), 3)
    for layer in net.layers:
        if hasattr(layer, "bias"):
            layer.bias[:] = 0
    amap = lrp_composite(net, np.zeros((1, 12, 12)), 1)
    assert np.all(amap.values == 0)


def test_translation_equivariance():
    rng = np.random.default_rng(0)
    conv1 = Conv2D(rng.normal(size=(4, 1, 3, 3)), np.zeros(4), padding=1)
    conv2 = Conv2D(rng.normal(size=(3, 4, 3, 3)), np.zeros(3), padding=1)
    # equal dense weights per channel: global sum pooling followed by a linear readout
    readout = np.repeat(rng.normal(size=(3, 2)), 16 * 16, axis=0)
    net = ToyNetwork([conv1, ReLU(), conv2, ReLU(), Flatten(), Dense(readout, np.zeros(2))], (1, 16, 16), 2)
    x = np.zeros((1, 16, 16))
    x[0, 4:8, 4:7] = rng.uniform(0.5, 1, (4, 3))
    shifted = np.roll(x, (3, 2), axis=(1, 2))
    a = lrp_composite(net, x, 0).values
    b = lrp_composite(net, shifted, 0).values
    np.testing.assert_allclose(np.roll(a, (3, 2), axis=(0, 1)), b, atol=1e-10)


def test_channel_sum_matches_independent_maps():
    net = make_cnn((3, 10, 10), 4, seed=2)
    x = np.random.default_rng(1).uniform(size=(3, 10, 10))
    rel = lrp_relevance(net, x, 2)
    amap = lrp_composite(net, x, 2)
    np.testing.assert_allclose(amap.values, rel[0] + rel[1] + rel[2])


def test_attribution_deterministic_and_rank():
    net = make_cnn((1, 10, 10), 3, seed=4)
    x = np.random.default_rng(0).uniform(size=(5, 1, 10, 10))
    a = attribute_batch(net, x, np.array([0, 1, 2, 0, 1]))
    b = attribute_batch(net, x, np.array([0, 1, 2, 0, 1]))
    for m, n in zip(a, b):
        assert np.array_equal(m.values, n.values)
        assert 1 <= m.predicted_rank_of_true_label <= 3
    pred = attribute_batch(net, x, np.zeros(5, int), target="predicted")
    _, logits = forward(net, x)
    assert [m.target_class for m in pred] == list(logits.argmax(axis=1))


def test_attribution_map_rejects_nonfinite():
    with pytest.raises(ValueError):
        AttributionMap(np.array([[np.nan]]))


# --------------------------------------------------------------------------- pooling


def test_pool_identity_and_ones():
    m = AttributionMap(np.random.default_rng(0).normal(size=(5, 6)))
    np.testing.assert_array_equal(sum_pool_grid(m, (5, 6)).values, m.values)
    np.testing.assert_array_equal(sum_pool_grid(AttributionMap(np.ones((4, 4))), (2, 2)).values, np.full((2, 2), 4.0))


def test_pool_matches_loop():
    v = np.random.default_rng(0).normal(size=(7, 7))
    out = sum_pool_grid(AttributionMap(v), (2, 2)).values
    expected = np.zeros((2, 2))
    for i in range(7):
        for j in range(7):
            expected[min(i // 3, 1), min(j // 3, 1)] += v[i, j]
    np.testing.assert_allclose(out, expected)


@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=finite), st.data())
def test_pool_preserves_total(values, data):
    gh = data.draw(st.integers(1, values.shape[0]))
    gw = data.draw(st.integers(1, values.shape[1]))
    out = sum_pool_grid(AttributionMap(values), (gh, gw)).values
    assert out.shape == (gh, gw)
    assert abs(out.sum() - values.sum()) <= 1e-9 * max(1.0, np.abs(values).sum())


def test_pool_grid_too_large():
    with pytest.raises(ValueError):
        sum_pool_grid(AttributionMap(np.ones((3, 3))), (4, 1))


# --------------------------------------------------------------------------- files


def test_atr_roundtrip_and_layout(tmp_path):
    vals = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    path = tmp_path / "a.atr"
    write_atr(path, [AttributionMap(v) for v in vals])
    raw = path.read_bytes()
    assert raw[:4] == b"ATR1"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [3, 4, 5]
    assert len(raw) == 16 + 4 * 60
    np.testing.assert_array_equal(read_atr(path), vals.astype(np.float64))


def test_atr_rejects_garbage(tmp_path):
    p = tmp_path / "bad.atr"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(FormatError):
        read_atr(p)
    p.write_bytes(b"ATR1" + np.array([2, 2, 2], "<u4").tobytes() + bytes(4))
    with pytest.raises(FormatError):
        read_atr(p)


def test_metadata_roundtrip(tmp_path):
    rows = [("7", 0, 1, 2), ("8", 1, 1, 1)]
    write_metadata(tmp_path / "m.csv", rows)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "sample_id,class_id,predicted_class,true_label_rank"
    assert read_metadata(tmp_path / "m.csv") == rows


def test_checkpoint_roundtrip(tmp_path):
    net = make_cnn((1, 12, 12), 3, seed=5)
    save_checkpoint(net, tmp_path / "m.spnn")
    back = load_checkpoint(tmp_path / "m.spnn")
    x = np.random.default_rng(0).uniform(size=(2, 1, 12, 12))
    np.testing.assert_array_equal(forward(net, x)[1], forward(back, x)[1])
