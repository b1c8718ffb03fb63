"""Feature image tests.

Synthesis is checked three ways: a finite-difference oracle on the input
gradient, a convex identity-network case with a known optimum, and the
guarantee that the returned iterate is the best one visited.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from pathens.features import (
    FeatureImage,
    _layer_loss_and_input_grad,
    activation_maximization,
    emit_image,
    good_splits,
    infer_shape,
    read_image,
    split_mean_feature,
)
from pathens.network import Dataset, Network, NetworkConfig, forward, init_network
from pathens.paths import FilterParams, Path, Split, SplitStats


def layer_loss(net, x, layer_index, target):
    """Squared distance of a recorded activation to the target; computed
    through the public forward pass, independent of the synthesis code."""
    _, trace = forward(net, np.asarray(x, float).ravel(), record=True)
    diff = trace.layers[layer_index] - target
    return float((diff * diff).sum())


# ------------------------------------------------------------- split average


def test_mean_of_a_single_traversing_point_is_that_point():
    pts = np.array([[0.1, 0.2, 0.3, 0.4], [0.9, 0.8, 0.7, 0.6]])
    ds = Dataset(pts, np.array([0, 1]))
    ids = np.array([[0, 1, 0], [1, 0, 0]])
    img = split_mean_feature(Split(0, 0, 1), ds, ids)
    assert_array_equal(img.pixels, pts[0])
    assert img.method == "average"
    assert img.tag == "0:0:1"
    assert img.shape == (2, 2)


def test_mean_of_zeros_and_ones_is_half():
    ds = Dataset(np.array([np.zeros(9), np.ones(9)]), np.array([0, 0]))
    ids = np.array([[0, 0, 0], [0, 0, 0]])
    img = split_mean_feature(Split(1, 0, 0), ds, ids)
    assert_array_equal(img.pixels, np.full(9, 0.5))
    assert img.shape == (3, 3)


def test_mean_matches_plain_accumulation():
    rng = np.random.default_rng(21)
    n = 60
    pts = rng.random((n, 6))
    ds = Dataset(pts, np.zeros(n, dtype=int))
    ids = rng.integers(0, 3, size=(n, 4))
    sp = Split(2, 1, 0)
    traversing = [i for i in range(n) if ids[i, 2] == 1 and ids[i, 3] == 0]
    if not traversing:  # the seed above does produce traversals; guard anyway
        pytest.skip("fixture produced no traversing point")
    total = np.zeros(6)
    for i in traversing:
        total += pts[i]
    img = split_mean_feature(sp, ds, ids, shape=(1, 6))
    assert_allclose(img.pixels, total / len(traversing), atol=1e-12)


def test_mean_accepts_a_list_of_paths():
    pts = np.array([[0.2, 0.4], [0.6, 0.8]])
    ds = Dataset(pts, np.array([0, 1]))
    paths = [Path(np.array([0, 0, 0]), np.zeros(3)), Path(np.array([0, 0, 1]), np.zeros(3))]
    img = split_mean_feature(Split(0, 0, 0), ds, paths)
    assert_allclose(img.pixels, [0.4, 0.6])


def test_mean_errors():
    ds = Dataset(np.array([[0.5, 0.5]]), np.array([0]))
    ids = np.array([[0, 0, 0]])
    with pytest.raises(ValueError, match="no training point"):
        split_mean_feature(Split(0, 1, 1), ds, ids)
    with pytest.raises(ValueError, match="out of range"):
        split_mean_feature(Split(2, 0, 0), ds, ids)
    with pytest.raises(ValueError):
        split_mean_feature(Split(0, 0, 0), ds, np.array([[0, 0, 0], [0, 0, 0]]))


def test_infer_shape():
    assert infer_shape(784) == (28, 28)
    assert infer_shape(16) == (4, 4)
    assert infer_shape(10) == (1, 10)
    assert infer_shape(1) == (1, 1)


# ---------------------------------------------------------------- synthesis


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(300)
    net = init_network(NetworkConfig((5, 6, 4, 3), "sigmoid"), 12)
    for layer_index in (1, 2, 3):  # both hiddens and the softmax output
        width = net.config.layer_sizes[layer_index]
        target = rng.random(width)
        x = rng.random((1, 5))
        loss, grad = _layer_loss_and_input_grad(net, x, layer_index, target[None, :])
        assert_allclose(loss, layer_loss(net, x, layer_index, target), rtol=1e-10)
        h = 1e-6
        for j in range(5):
            up, down = x.copy(), x.copy()
            up[0, j] += h
            down[0, j] -= h
            want = (layer_loss(net, up, layer_index, target)
                    - layer_loss(net, down, layer_index, target)) / (2 * h)
            assert_allclose(grad[0, j], want, rtol=1e-4, atol=1e-10)


def test_synthesis_with_an_already_optimal_init_returns_it():
    net = init_network(NetworkConfig((4, 5, 3), "sigmoid"), 3)
    x0 = np.full(4, 0.5)
    _, trace = forward(net, x0, record=True)
    target = trace.layers[1]
    img, losses = activation_maximization(net, 1, target, steps=25, step_size=0.1, init=x0)
    assert losses[0] == 0.0
    assert min(losses) == 0.0
    assert_array_equal(img.pixels, x0)


def test_synthesis_solves_the_identity_relu_case():
    # relu over identity weights is the identity on [0,1], so the loss is
    # plainly |x - target|^2 with a unique optimum inside the box
    cfg = NetworkConfig((6, 6, 2), "relu")
    net = init_network(cfg, 0)
    net.weights[0][:] = np.eye(6)
    net.biases[0][:] = 0.0
    target = np.array([0.3, 0.8, 0.5, 0.2, 0.7, 0.4])
    img, losses = activation_maximization(
        net, 1, target, steps=400, step_size=0.05, init=np.full(6, 0.5))
    assert min(losses) < 1e-4
    assert_allclose(img.pixels, target, atol=1e-2)


def test_synthesis_returns_the_best_visited_iterate():
    rng = np.random.default_rng(44)
    for trial in range(5):
        net = init_network(NetworkConfig((5, 7, 3), "sigmoid"), trial)
        target = rng.random(7)
        init = rng.random(5)
        img, losses = activation_maximization(
            net, 1, target, steps=40, step_size=0.3, init=init)
        assert len(losses) == 41
        assert min(losses) <= losses[0]
        assert_allclose(layer_loss(net, img.pixels, 1, target), min(losses), rtol=1e-10)


def test_synthesis_toward_the_softmax_layer():
    net = init_network(NetworkConfig((4, 6, 3), "sigmoid"), 9)
    target = np.array([1.0, 0.0, 0.0])
    img, losses = activation_maximization(
        net, 2, target, steps=150, step_size=0.1, init=np.full(4, 0.5), tag="onehot")
    assert losses[-1] < losses[0]
    assert img.tag == "onehot"
    assert img.method == "backprop"
    assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0


def test_synthesis_with_zero_steps_keeps_the_clamped_init():
    net = init_network(NetworkConfig((4, 5, 3), "sigmoid"), 1)
    img, losses = activation_maximization(
        net, 1, np.zeros(5), steps=0, step_size=0.1, init=np.array([2.0, -1.0, 0.5, 0.5]))
    assert len(losses) == 1
    assert_array_equal(img.pixels, [1.0, 0.0, 0.5, 0.5])


def test_synthesis_validates_arguments():
    net = init_network(NetworkConfig((4, 5, 3), "sigmoid"), 1)
    with pytest.raises(ValueError, match="layer_index"):
        activation_maximization(net, 0, np.zeros(4), 10, 0.1, np.zeros(4))
    with pytest.raises(ValueError, match="layer_index"):
        activation_maximization(net, 3, np.zeros(3), 10, 0.1, np.zeros(4))
    with pytest.raises(ValueError, match="target"):
        activation_maximization(net, 1, np.zeros(4), 10, 0.1, np.zeros(4))
    with pytest.raises(ValueError, match="steps"):
        activation_maximization(net, 1, np.zeros(5), -1, 0.1, np.zeros(4))


# -------------------------------------------------------------- good splits


def test_good_splits_filters_on_count_and_accuracy_only():
    stats = {
        Split(1, 2, 0): SplitStats(30, 0.95),
        Split(0, 1, 1): SplitStats(30, 0.99),
        Split(0, 0, 1): SplitStats(5, 1.0),    # too small
        Split(1, 0, 0): SplitStats(50, 0.50),  # too sloppy
    }
    params = FilterParams(1e-9, 10, 0.9)  # the distance threshold plays no role
    assert good_splits(stats, params) == [Split(0, 1, 1), Split(1, 2, 0)]
    assert good_splits({}, params) == []


# ------------------------------------------------------------------- images


def test_pgm_bytes_are_exactly_as_specified(tmp_path):
    img = FeatureImage(np.array([0.0, 0.5, 1.0, 0.2, 0.8, 1 / 255]), (2, 3), "average")
    out = tmp_path / "img.pgm"
    emit_image(img, out)
    want = b"P5\n3 2\n255\n" + bytes([0, 128, 255, 51, 204, 1])
    assert out.read_bytes() == want


def test_pgm_round_trip_within_quantization(tmp_path):
    rng = np.random.default_rng(31)
    pixels = rng.random(35)
    img = FeatureImage(pixels, (5, 7), "backprop")
    out = tmp_path / "img.pgm"
    emit_image(img, out)
    back = read_image(out)
    assert back.shape == (5, 7)
    assert np.abs(back.ravel() - pixels).max() <= 0.5 / 255 + 1e-12


def test_pgm_round_trip_is_exact_on_the_8_bit_lattice(tmp_path):
    pixels = np.arange(12) / 255.0 * 20
    pixels = np.round(pixels * 255) / 255.0
    img = FeatureImage(pixels, (3, 4), "average")
    emit_image(img, tmp_path / "img.pgm")
    assert_allclose(read_image(tmp_path / "img.pgm").ravel(), pixels, rtol=1e-15)


def test_pgm_reader_handles_comments_and_odd_whitespace(tmp_path):
    payload = bytes(range(6))
    raw = b"P5 # binary grayscale\n# a comment line\n 3\t2 \n255\n" + payload
    fp = tmp_path / "odd.pgm"
    fp.write_bytes(raw)
    back = read_image(fp)
    assert back.shape == (2, 3)
    assert_allclose(back.ravel() * 255, np.arange(6), atol=1e-12)


def test_pgm_reader_rejects_foreign_files(tmp_path):
    fp = tmp_path / "bad.pgm"
    fp.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(ValueError, match="binary PGM"):
        read_image(fp)
    fp.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(ValueError, match="8-bit"):
        read_image(fp)
    fp.write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(ValueError, match="truncated"):
        read_image(fp)


def test_unsupported_suffixes_are_rejected(tmp_path):
    img = FeatureImage(np.zeros(4), (2, 2), "average")
    with pytest.raises(ValueError, match="suffix"):
        emit_image(img, tmp_path / "img.jpg")
    with pytest.raises(ValueError, match="suffix"):
        read_image(tmp_path / "img.bmp")


def test_png_round_trip(tmp_path):
    pytest.importorskip("PIL")
    pixels = np.round(np.random.default_rng(3).random(16) * 255) / 255.0
    img = FeatureImage(pixels, (4, 4), "backprop")
    emit_image(img, tmp_path / "img.png")
    back = read_image(tmp_path / "img.png")
    assert_allclose(back.ravel(), pixels, rtol=1e-15)


def test_feature_image_validation():
    with pytest.raises(ValueError, match="shape"):
        FeatureImage(np.zeros(5), (2, 2), "average")
    with pytest.raises(ValueError, match="method"):
        FeatureImage(np.zeros(4), (2, 2), "dreamt")
    with pytest.raises(ValueError, match="pixels"):
        FeatureImage(np.array([0.5, 1.2, 0.0, 0.1]), (2, 2), "average")
    img = FeatureImage(np.arange(6) / 10.0, (2, 3), "average")
    assert img.grid().shape == (2, 3)
