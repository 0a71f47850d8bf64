import numpy as np
import pytest

from gradcheck import check_layer, check_loss, random_case
from pipetrain.tensor import (CacheMissError, LayerSpec, NonFiniteError, ShapeError, build_layer, softmax,
                              softmax_xent_loss)


@pytest.mark.parametrize("kind", ["dense", "relu", "flatten", "conv2d"])
def test_layer_gradients_match_finite_differences(kind, rng):
    for _ in range(5):
        spec, x = random_case(kind, rng)
        assert check_layer(spec, x, rng) < 1e-4


def test_loss_gradient_matches_finite_differences(rng):
    logits = rng.standard_normal((5, 3))
    assert check_loss(logits, rng.integers(0, 3, size=5)) < 1e-4


def test_dense_forward_values():
    layer = build_layer(LayerSpec.dense(2, 1))
    W, b = np.array([[2.0, -1.0]]), np.array([0.5])
    out = layer.forward(np.array([[1.0, 3.0]]), (1, 1), [W, b])
    assert out.tolist() == [[-0.5]]


def test_conv_matches_direct_correlation(rng):
    spec = LayerSpec.conv2d(2, 3, kernel=3, stride=2, padding=1)
    layer = build_layer(spec, rng)
    x = rng.standard_normal((2, 2, 5, 6))
    out = layer.forward(x, (1, 1))
    W, b = layer.weights
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expect = np.zeros_like(out)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            expect[:, :, i, j] = np.einsum("nchw,ochw->no", patch, W) + b
    np.testing.assert_allclose(out, expect, atol=1e-12)
    assert spec.output_shape((2, 5, 6)) == out.shape[1:]


def test_relu_subgradient_at_zero_is_zero():
    layer = build_layer(LayerSpec.relu())
    layer.forward(np.array([[0.0, 1.0, -1.0]]), "k")
    dx, _ = layer.backward(np.ones((1, 3)), "k")
    assert dx.tolist() == [[0.0, 1.0, 0.0]]


def test_forward_does_not_mutate_weights(rng):
    layer = build_layer(LayerSpec.dense(3, 2), rng)
    before = [w.copy() for w in layer.weights]
    layer.forward(rng.standard_normal((4, 3)), "k")
    layer.backward(rng.standard_normal((4, 2)), "k")
    for a, b in zip(before, layer.weights):
        np.testing.assert_array_equal(a, b)


def test_cache_is_keyed_per_microbatch(rng):
    layer = build_layer(LayerSpec.dense(3, 2), rng)
    x1, x2 = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    layer.forward(x1, (1, 1))
    layer.forward(x2, (1, 2))
    g = np.ones((2, 2))
    _, (dW2, _) = layer.backward(g, (1, 2))
    np.testing.assert_allclose(dW2, g.T @ x2)
    assert list(layer.cache) == [(1, 1)]
    with pytest.raises(CacheMissError):
        layer.backward(g, (1, 2))


def test_shape_errors(rng):
    layer = build_layer(LayerSpec.dense(3, 2), rng)
    with pytest.raises(ShapeError):
        layer.forward(np.zeros((2, 4)), "k")
    with pytest.raises(ShapeError):
        layer.forward(np.zeros((2, 3)), "k", weights=[layer.weights[0]])
    with pytest.raises(ShapeError):
        LayerSpec.conv2d(1, 1, kernel=5).output_shape((1, 3, 3))
    with pytest.raises(ValueError):
        LayerSpec("pool")


def test_non_finite_is_reported(rng):
    layer = build_layer(LayerSpec.dense(2, 2), rng)
    with pytest.raises(NonFiniteError):
        layer.forward(np.array([[np.inf, 0.0]]), "k")


def test_softmax_xent_values():
    loss, grad = softmax_xent_loss(np.zeros((2, 4)), np.array([0, 3]))
    assert loss == pytest.approx(np.log(4))
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)
    np.testing.assert_allclose(softmax(np.array([[1000.0, 1000.0]])), [[0.5, 0.5]])
    with pytest.raises(ValueError):
        softmax_xent_loss(np.zeros((1, 2)), np.array([2]))
