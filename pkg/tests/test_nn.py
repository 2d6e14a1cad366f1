import numpy as np
import pytest

from crossmetric.nn import (
    DenseLayer,
    LayerGrad,
    SgdConfig,
    ShapeError,
    dense_backward,
    dense_forward,
    finite_difference_check,
    make_rng,
    predict,
    sgd_step,
    stack_backward,
    stack_forward,
)


def test_identity_layer_passes_input_through():
    layer = DenseLayer(np.eye(3), np.zeros(3), "identity")
    x = np.array([[1.0, -2.0, 3.5]])
    np.testing.assert_array_equal(dense_forward(layer, x), x)


def test_sigmoid_of_zero_is_half():
    layer = DenseLayer(np.zeros((4, 2)), np.zeros(4), "sigmoid")
    out = dense_forward(layer, np.array([[3.0, -7.0], [0.1, 100.0]]))
    np.testing.assert_array_equal(out, 0.5)


def test_relu_clamps_negatives():
    layer = DenseLayer(np.eye(2), np.zeros(2), "relu")
    np.testing.assert_array_equal(dense_forward(layer, np.array([[-1.0, 2.0]])), [[0.0, 2.0]])


def test_sigmoid_does_not_overflow():
    layer = DenseLayer(np.eye(2), np.zeros(2), "sigmoid")
    out = dense_forward(layer, np.array([[-1000.0, 1000.0]]))
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [[0.0, 1.0]])


def test_forward_rejects_wrong_width():
    layer = DenseLayer(np.eye(3), np.zeros(3))
    with pytest.raises(ShapeError):
        dense_forward(layer, np.ones((2, 4)))


def test_layer_rejects_inconsistent_bias():
    with pytest.raises(ShapeError):
        DenseLayer(np.eye(3), np.zeros(2))


def test_scalar_chain_rule():
    w, x, g = 1.7, -0.4, 2.5
    layer = DenseLayer(np.array([[w]]), np.zeros(1), "identity")
    gw, gb, gx = dense_backward(layer, np.array([[x]]), np.array([[g]]))
    assert gw[0, 0] == pytest.approx(g * x)
    assert gb[0] == pytest.approx(g)
    assert gx[0, 0] == pytest.approx(g * w)


def test_relu_dead_unit_has_zero_gradients():
    layer = DenseLayer(np.array([[1.0]]), np.array([-5.0]), "relu")
    gw, gb, gx = dense_backward(layer, np.array([[2.0]]), np.array([[3.0]]))
    assert gw[0, 0] == 0.0 and gb[0] == 0.0 and gx[0, 0] == 0.0


def test_backward_rejects_bad_upstream_shape():
    layer = DenseLayer(np.eye(2), np.zeros(2))
    with pytest.raises(ShapeError):
        dense_backward(layer, np.ones((3, 2)), np.ones((2, 2)))


def _random_stack(rng, dims, acts):
    return [DenseLayer.create(dims[k], dims[k + 1], acts[k], rng) for k in range(len(acts))]


@pytest.mark.parametrize("acts", [("relu", "sigmoid", "identity"), ("sigmoid", "sigmoid", "relu")])
def test_three_layer_stack_matches_finite_differences(acts):
    rng = make_rng(3)
    layers = _random_stack(rng, (5, 7, 6, 3), acts)
    x = rng.standard_normal((4, 5))
    target = rng.standard_normal((4, 3))

    def loss_fn():
        acts_ = stack_forward(layers, x)
        r = acts_[-1] - target
        grads, _ = stack_backward(layers, acts_, r)
        flat = []
        for g in grads:
            flat += [g.weights, g.bias]
        return 0.5 * float((r**2).sum()), flat

    params = []
    for layer in layers:
        params += [layer.weights, layer.bias]
    res = finite_difference_check(loss_fn, params, step=1e-5)
    assert res.max_relative_error < 1e-6


def test_finite_difference_check_on_quadratic():
    w = np.array([3.0])

    def loss_fn():
        return float(w[0] ** 2), [2.0 * w]

    res = finite_difference_check(loss_fn, [w])
    assert res.max_relative_error < 1e-9
    assert res.checked == 1


def test_finite_difference_check_flags_wrong_gradient():
    w = np.array([3.0])
    res = finite_difference_check(lambda: (float(w[0] ** 2), [w.copy()]), [w])
    assert res.max_relative_error > 0.3


def test_finite_difference_check_rejects_non_finite_loss():
    w = np.array([1.0])
    with pytest.raises(FloatingPointError):
        finite_difference_check(lambda: (float("nan"), [w]), [w])


def _one_param(w):
    return [DenseLayer(np.array([[w]]), np.zeros(1))]


def test_sgd_fixed_point():
    layers = _one_param(1.0)
    sgd_step(layers, [LayerGrad(np.zeros((1, 1)), np.zeros(1))], SgdConfig(0.001, 0.0))
    assert layers[0].weights[0, 0] == 1.0


def test_sgd_weight_decay_arithmetic():
    # 1 - 0.001 * 0.004 * 1 = 0.999996
    layers = _one_param(1.0)
    sgd_step(layers, [LayerGrad(np.zeros((1, 1)), np.zeros(1))], SgdConfig(0.001, 0.004))
    assert layers[0].weights[0, 0] == pytest.approx(0.999996, abs=1e-15)


def test_sgd_plain_step():
    layers = _one_param(0.5)
    sgd_step(layers, [LayerGrad(np.ones((1, 1)), np.zeros(1))], SgdConfig(0.1, 0.0))
    assert layers[0].weights[0, 0] == pytest.approx(0.4, abs=1e-15)


def test_weight_decay_leaves_bias_alone():
    layer = DenseLayer(np.ones((2, 2)), np.ones(2))
    sgd_step([layer], [LayerGrad(np.zeros((2, 2)), np.zeros(2))], SgdConfig(0.1, 0.5))
    np.testing.assert_array_equal(layer.bias, 1.0)
    np.testing.assert_allclose(layer.weights, 0.95)


def test_weight_decay_shrinks_every_step():
    rng = make_rng(0)
    layer = DenseLayer.create(4, 3, "relu", rng)
    zero = LayerGrad(np.zeros((3, 4)), np.zeros(3))
    mags = [np.abs(layer.weights).copy()]
    for _ in range(5):
        sgd_step([layer], [zero], SgdConfig(0.01, 0.004))
        mags.append(np.abs(layer.weights).copy())
    for before, after in zip(mags, mags[1:]):
        assert np.all(after < before)


def test_zero_learning_rate_is_bit_exact_noop():
    rng = make_rng(1)
    layer = DenseLayer.create(4, 3, "relu", rng)
    before = layer.weights.copy()
    g = LayerGrad(rng.standard_normal((3, 4)), rng.standard_normal(3))
    sgd_step([layer], [g], SgdConfig(0.0, 0.004))
    np.testing.assert_array_equal(layer.weights, before)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step(_one_param(1.0), [LayerGrad(np.zeros((2, 1)), np.zeros(1))], SgdConfig())


def test_sgd_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        SgdConfig(weight_decay=-0.1)


def test_glorot_init_bounds():
    layer = DenseLayer.create(30, 20, "relu", make_rng(5))
    s = np.sqrt(6 / 50)
    assert np.abs(layer.weights).max() <= s
    np.testing.assert_array_equal(layer.bias, 0.0)


def test_rng_is_deterministic_and_streams_differ():
    a = make_rng(42).standard_normal(5)
    b = make_rng(42).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(make_rng(42, 1).standard_normal(5), make_rng(42, 2).standard_normal(5))


def test_forward_is_pure():
    rng = make_rng(2)
    layers = _random_stack(rng, (8, 16, 4), ("relu", "sigmoid"))
    x = rng.standard_normal((10, 8))
    np.testing.assert_array_equal(predict(layers, x), predict(layers, x))
    np.testing.assert_array_equal(stack_forward(layers, x)[-1], stack_forward(layers, x)[-1])


def test_predict_rows_do_not_depend_on_batch():
    rng = make_rng(4)
    layers = _random_stack(rng, (512, 512, 2), ("relu", "identity"))
    x = rng.standard_normal((150, 512))
    full = predict(layers, x)
    for i in (0, 63, 64, 149):
        np.testing.assert_array_equal(predict(layers, x[i : i + 1]), full[i : i + 1])
    np.testing.assert_array_equal(predict(layers, x[37:101]), full[37:101])
    np.testing.assert_allclose(full, stack_forward(layers, x)[-1], rtol=1e-12, atol=1e-12)
