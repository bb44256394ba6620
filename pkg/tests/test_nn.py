import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import grad_check
from oracles import direct_correlate_same
from wordaad.nn import (ELU, AdamState, AvgPool, BatchNorm, DenseSigmoid, DepthwiseSpatial, Dropout,
                        SeparableConv, TemporalConv, adam_step, bce_loss, max_norm_project, same_padding,
                        sigmoid)
from wordaad.rng import RngStream


def f64(layer):
    return layer.astype(np.float64)


# ----------------------------------------------------------------- temporal conv


def test_same_padding_puts_extra_sample_right():
    assert same_padding(2) == (0, 1)
    assert same_padding(128) == (63, 64)
    assert same_padding(5) == (2, 2)


def test_temporal_identity_kernel_replicates_input():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 1, 3, 10))
    w = np.zeros((4, 1, 1, 5))
    w[..., 2] = 1.0
    y = TemporalConv(4, 5, w).forward(x)
    assert y.shape == (2, 4, 3, 10)
    for f in range(4):
        np.testing.assert_allclose(y[:, f], x[:, 0], atol=1e-12)


def test_temporal_even_kernel_pads_right():
    x = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3)
    y = TemporalConv(1, 2, np.ones((1, 1, 1, 2))).forward(x)
    # Right padding: [1+2, 2+3, 3+0].
    np.testing.assert_allclose(y.ravel(), [3.0, 5.0, 3.0], atol=1e-12)


@pytest.mark.parametrize("k", [1, 4, 7, 16])
def test_temporal_matches_direct_loop(k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 1, 3, 20))
    w = rng.standard_normal((2, 1, 1, k))
    y = TemporalConv(2, k, w).forward(x)
    for n in range(2):
        for f in range(2):
            for c in range(3):
                np.testing.assert_allclose(y[n, f, c], direct_correlate_same(x[n, 0, c], w[f, 0, 0]), atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_temporal_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = f64(TemporalConv(3, 4, rng.standard_normal((3, 1, 1, 4))))
    assert grad_check(layer, rng.standard_normal((2, 1, 3, 8)), seed) <= 1e-4


def test_temporal_rejects_multi_map_input():
    with pytest.raises(ValueError):
        TemporalConv(2, 3).forward(np.zeros((1, 2, 3, 8)))


# ----------------------------------------------------------------- depthwise spatial


def test_depthwise_one_hot_selects_channel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 7))
    w = np.zeros((6, 1, 5, 1))
    w[:, 0, 2, 0] = 1.0
    y = DepthwiseSpatial(3, 2, 5, w).forward(x)
    assert y.shape == (2, 6, 1, 7)
    for f in range(3):
        for d in range(2):
            np.testing.assert_allclose(y[:, f * 2 + d, 0], x[:, f, 2], atol=1e-12)


def test_depthwise_uniform_weights_give_channel_mean():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 2, 4, 6))
    y = DepthwiseSpatial(2, 1, 4, np.full((2, 1, 4, 1), 0.25)).forward(x)
    np.testing.assert_allclose(y[:, :, 0], x.mean(axis=2), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_depthwise_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = f64(DepthwiseSpatial(2, 2, 3, rng.standard_normal((4, 1, 3, 1))))
    assert grad_check(layer, rng.standard_normal((2, 2, 3, 5)), seed) <= 1e-4


def test_depthwise_kernel_height_mismatch():
    with pytest.raises(ValueError):
        DepthwiseSpatial(2, 2, 3).forward(np.zeros((1, 2, 4, 5)))


# ----------------------------------------------------------------- separable conv


def test_separable_identity():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 1, 9))
    dw = np.zeros((3, 1, 1, 3))
    dw[..., 1] = 1.0
    pw = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_allclose(SeparableConv(3, 3, 3, dw, pw).forward(x), x, atol=1e-12)


def test_separable_sum_of_maps():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 1, 9))
    dw = np.zeros((3, 1, 1, 4))
    dw[..., 1] = 1.0  # the centre tap for an even kernel padded (1, 2)
    y = SeparableConv(3, 2, 4, dw, np.ones((2, 3, 1, 1))).forward(x)
    for o in range(2):
        np.testing.assert_allclose(y[:, o, 0], x[:, :, 0].sum(axis=1), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_separable_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = f64(SeparableConv(3, 2, 4, rng.standard_normal((3, 1, 1, 4)), rng.standard_normal((2, 3, 1, 1))))
    assert grad_check(layer, rng.standard_normal((2, 3, 1, 7)), seed) <= 1e-4


# ----------------------------------------------------------------- batch norm


def test_batchnorm_train_normalises():
    rng = np.random.default_rng(5)
    x = 3.0 + 2.0 * rng.standard_normal((256, 4, 1, 10))
    y = f64(BatchNorm(4)).forward(x, training=True)
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-5)
    v = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), v / (v + 1e-3), rtol=1e-6)


def test_batchnorm_eval_with_unit_running_stats_is_affine():
    bn = f64(BatchNorm(2))
    bn.params["gamma"][:] = [2.0, 0.5]
    bn.params["beta"][:] = [1.0, -1.0]
    x = np.random.default_rng(6).standard_normal((3, 2, 1, 4))
    expected = (x / np.sqrt(1 + 1e-3)) * np.array([2.0, 0.5])[None, :, None, None] + np.array([1.0, -1.0])[
        None, :, None, None]
    np.testing.assert_allclose(bn.forward(x, training=False), expected, atol=1e-12)


def test_batchnorm_running_stats_momentum():
    bn = f64(BatchNorm(1))
    x = np.full((2, 1, 1, 2), 5.0)
    x[0] = 3.0
    bn.forward(x, training=True)
    assert bn.buffers["running_mean"][0] == pytest.approx(0.99 * 0 + 0.01 * 4.0)
    # unbiased batch variance of [3, 3, 5, 5] is 4/3
    assert bn.buffers["running_var"][0] == pytest.approx(0.99 * 1 + 0.01 * 4.0 / 3.0)


@pytest.mark.parametrize("seed", range(5))
def test_batchnorm_gradient(seed):
    rng = np.random.default_rng(seed)
    bn = f64(BatchNorm(3))
    bn.params["gamma"][:] = rng.uniform(0.5, 2, 3)
    bn.params["beta"][:] = rng.standard_normal(3)
    assert grad_check(bn, rng.standard_normal((4, 3, 2, 5)), seed) <= 1e-3


def test_batchnorm_rejects_batch_of_one():
    with pytest.raises(ValueError):
        BatchNorm(2).forward(np.zeros((1, 2, 1, 4)), training=True)


# ----------------------------------------------------------------- elu / pool / dropout


def test_elu_values():
    y = ELU().forward(np.array([0.0, -1e3, 1.0, -1.0]).reshape(1, 1, 1, 4))
    np.testing.assert_allclose(y.ravel(), [0.0, -1.0, 1.0, np.expm1(-1.0)], atol=1e-6)


def test_elu_gradient():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 2, 1, 6))
    x[np.abs(x) < 1e-3] = 0.5
    assert grad_check(ELU(), x) <= 1e-4


def test_avg_pool_truncates():
    y = AvgPool(4).forward(np.array([1.0, 2.0, 3.0, 4.0, 100.0]).reshape(1, 1, 1, 5))
    np.testing.assert_allclose(y.ravel(), [2.5])


def test_avg_pool_gradient():
    rng = np.random.default_rng(8)
    assert grad_check(AvgPool(3), rng.standard_normal((2, 2, 1, 10))) <= 1e-4


def test_dropout_zero_prob_is_identity():
    x = np.random.default_rng(9).standard_normal((2, 2, 1, 5))
    np.testing.assert_array_equal(Dropout(0.0).forward(x, training=True), x)


def test_dropout_eval_is_identity():
    x = np.random.default_rng(9).standard_normal((2, 2, 1, 5))
    assert Dropout(0.25, RngStream(0, "d")).forward(x, training=False) is x


def test_dropout_preserves_mean():
    x = np.ones((1, 1, 1, 10_000))
    y = Dropout(0.25, RngStream(0, "drop")).forward(x, training=True)
    assert abs(y.mean() - 1.0) < 0.02
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}


def test_dropout_gradient_with_fixed_mask():
    x = np.random.default_rng(10).standard_normal((2, 2, 1, 6))
    layer = Dropout(0.3)
    assert grad_check(layer, x, rng_factory=lambda: RngStream(1, "mask")) <= 1e-4


@pytest.mark.parametrize("p", [-0.1, 1.0])
def test_dropout_rejects_bad_probability(p):
    with pytest.raises(ValueError):
        Dropout(p)


# ----------------------------------------------------------------- dense / sigmoid / loss


def test_dense_zero_weights_half():
    p = DenseSigmoid(5).forward(np.random.default_rng(0).standard_normal((3, 5)))
    np.testing.assert_allclose(p, 0.5)


def test_sigmoid_is_stable():
    p = sigmoid(np.array([700.0, -700.0, 0.0]))
    assert np.all(np.isfinite(p))
    assert p[0] <= 1.0 and p[1] >= 0.0 and p[2] == 0.5


@pytest.mark.parametrize("seed", range(5))
def test_dense_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = f64(DenseSigmoid(6, rng.standard_normal((1, 6)), rng.standard_normal(1)))
    assert grad_check(layer, rng.standard_normal((3, 6)), seed) <= 1e-4


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        DenseSigmoid(4).forward(np.zeros((2, 5)))


def test_bce_half_probability():
    loss, _ = bce_loss(np.array([0.5, 0.5]), np.array([0, 1]))
    assert loss == pytest.approx(np.log(2), abs=1e-6)


def test_bce_perfect_predictions():
    loss, _ = bce_loss(np.array([0.0, 1.0]), np.array([0, 1]))
    assert loss <= 1e-6


def test_bce_logit_gradient_identity():
    # dL/dlogit = sigmoid(logit) - y for a batch of one.
    logit = np.log(0.7 / 0.3)
    layer = DenseSigmoid(1, np.ones((1, 1)), np.zeros(1)).astype(np.float64)
    p = layer.forward(np.array([[logit]]))
    _, grad_p = bce_loss(p, np.array([1]))
    layer.zero_grad()
    layer.backward(grad_p)
    assert layer.grads["bias"][0] == pytest.approx(-0.3, abs=1e-6)


def test_bce_rejects_bad_labels():
    with pytest.raises(ValueError):
        bce_loss(np.array([0.5]), np.array([2]))


# ----------------------------------------------------------------- adam / max norm


def test_adam_first_step_magnitude_is_lr():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState(lr=1e-3)
    adam_step(params, {"w": np.array([0.5, -4.0, 1e-3])}, state)
    np.testing.assert_allclose(np.abs(params["w"] - [1.0, -2.0, 3.0]), 1e-3, rtol=1e-3)


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, 2.0])}
    state = AdamState(lr=0.1)
    for _ in range(50):
        adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"], [1.0, 2.0])


def test_adam_minimises_quadratic():
    params = {"w": np.array([3.0])}
    state = AdamState(lr=0.1)
    for _ in range(500):
        adam_step(params, {"w": 2 * params["w"]}, state)
    assert abs(params["w"][0]) < 1e-3


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_max_norm_leaves_small_vectors():
    w = np.array([[0.3, 0.4]])
    np.testing.assert_array_equal(max_norm_project(w.copy(), 1.0), w)


def test_max_norm_rescales_to_limit():
    w = np.array([[1.2, 1.6]])  # norm 2
    out = max_norm_project(w.copy(), 1.0)
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(out / np.linalg.norm(out), w / 2.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 10.0))
def test_max_norm_property(seed, limit):
    w = np.random.default_rng(seed).standard_normal((5, 7)).astype(np.float32) * 3
    out = max_norm_project(w, limit)
    assert np.all(np.linalg.norm(out.astype(np.float64), axis=1) <= limit + 1e-6 * max(1.0, limit))
