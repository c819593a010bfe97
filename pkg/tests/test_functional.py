import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cvm_cervix import functional as F
from cvm_cervix.errors import ContractError, DimensionError, LabelError
from cvm_cervix.tensor import GradTape, Tensor, backward

from helpers import gradcheck
from oracles import naive_conv2d, naive_grouped_conv2d, per_pixel_matmul


# -- convolutions ----------------------------------------------------------

def test_conv2d_all_ones():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv2d_zero_kernel():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 5, 5)))
    out = F.conv2d(x, Tensor(np.zeros((1, 3, 1, 1))))
    assert not out.data.any()


def test_conv2d_matches_naive_loops_bitwise():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    np.testing.assert_array_equal(F.conv2d(Tensor(x), Tensor(w)).data, naive_conv2d(x, w))
    np.testing.assert_array_equal(F.conv2d(Tensor(x), Tensor(w), 2, 1).data, naive_conv2d(x, w, 2, 1))


def test_conv2d_gradient():
    rng = np.random.default_rng(0)
    assert gradcheck(lambda x, w: F.conv2d(x, w, 1, 1),
                     [rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3))]) < 1e-4


def test_conv2d_output_size_formula():
    out = F.conv2d(Tensor(np.ones((1, 2, 9, 7))), Tensor(np.ones((3, 2, 3, 2))), stride=2, padding=1)
    assert out.shape == (1, 3, (9 + 2 - 3) // 2 + 1, (7 + 2 - 2) // 2 + 1)


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_depthwise_identity_and_zero():
    x = np.random.default_rng(1).standard_normal((2, 4, 5, 5))
    np.testing.assert_array_equal(F.depthwise_conv2d(Tensor(x), Tensor(np.ones((4, 1, 1, 1)))).data, x)
    assert not F.depthwise_conv2d(Tensor(x), Tensor(np.zeros((4, 1, 3, 3))), padding=1).data.any()


def test_depthwise_matches_grouped_naive_conv():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((2, 3, 7, 7)), rng.standard_normal((3, 1, 3, 3))
    np.testing.assert_array_equal(F.depthwise_conv2d(Tensor(x), Tensor(w), 2, 1).data,
                                  naive_grouped_conv2d(x, w, 2, 1))


def test_depthwise_channels_are_independent():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((1, 3, 6, 6)), rng.standard_normal((3, 1, 3, 3))
    base = F.depthwise_conv2d(Tensor(x), Tensor(w), padding=1).data
    x2 = x.copy()
    x2[:, 1] += 5.0
    moved = F.depthwise_conv2d(Tensor(x2), Tensor(w), padding=1).data
    np.testing.assert_array_equal(base[:, [0, 2]], moved[:, [0, 2]])
    assert not np.array_equal(base[:, 1], moved[:, 1])


def test_depthwise_channel_mismatch():
    with pytest.raises(DimensionError):
        F.depthwise_conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 1, 3, 3))))


def test_pointwise_identity_and_matmul_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 5, 3, 3))
    eye = np.eye(5)[:, :, None, None]
    np.testing.assert_array_equal(F.pointwise_conv2d(Tensor(x), Tensor(eye)).data, x)
    w = rng.standard_normal((7, 5, 1, 1))
    np.testing.assert_allclose(F.pointwise_conv2d(Tensor(x), Tensor(w)).data, per_pixel_matmul(x, w), rtol=1e-12)
    np.testing.assert_array_equal(F.pointwise_conv2d(Tensor(x), Tensor(w)).data, naive_conv2d(x, w))


def test_pointwise_rejects_non_unit_kernel():
    with pytest.raises(ContractError):
        F.pointwise_conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 2, 3, 3))))


def test_separable_parameter_count():
    c, o, k = 32, 64, 3
    depthwise = c * k * k
    pointwise = c * o
    assert (depthwise, pointwise, depthwise + pointwise) == (288, 2048, 2336)
    assert o * c * k * k == 18432
    assert depthwise + pointwise < o * c * k * k


# -- pooling ---------------------------------------------------------------

def test_pools_of_constant_input():
    x = Tensor(np.full((1, 2, 4, 4), 3.5))
    np.testing.assert_array_equal(F.max_pool2d(x, 2).data, 3.5)
    np.testing.assert_array_equal(F.avg_pool2d(x, 2).data, 3.5)
    np.testing.assert_array_equal(F.global_avg_pool(x).data, np.full((1, 2), 3.5))


def test_max_pool_picks_maximum():
    assert F.max_pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2).data.item() == 4.0


def test_avg_pool_gradient_is_uniform():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 4, 4)), requires_grad=True)
    with GradTape() as tape:
        loss = F.avg_pool2d(x, 2).sum()
    np.testing.assert_array_equal(backward(loss, tape)[x], np.full((1, 1, 4, 4), 0.25))


def test_max_pool_gradient_ties_go_to_lowest_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = F.max_pool2d(x, 2).sum()
    np.testing.assert_array_equal(backward(loss, tape)[x], [[[[1.0, 0.0], [0.0, 0.0]]]])


@pytest.mark.parametrize("seed", range(3))
def test_pool_gradients(seed):
    x = np.random.default_rng(seed).permutation(50).reshape(1, 2, 5, 5) / 7.0
    assert gradcheck(lambda t: F.max_pool2d(t, 2, 1), [x.copy()], seed) < 1e-4
    assert gradcheck(lambda t: F.avg_pool2d(t, 3, 2), [x.copy()], seed) < 1e-4


def test_pool_window_too_big():
    with pytest.raises(DimensionError):
        F.max_pool2d(Tensor(np.ones((1, 1, 2, 2))), 3)


# -- normalization -----------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = F.layer_norm(Tensor(np.full((2, 4), 7.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_normalized_row_unchanged():
    out = F.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], rtol=1e-10)


def test_layer_norm_statistics():
    x = np.random.default_rng(0).standard_normal((6, 10)) * 3 + 2
    out = F.layer_norm(Tensor(x), Tensor(np.ones(10)), Tensor(np.zeros(10)), eps=1e-5).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.var(axis=-1) - 1).max() < 1e-4


def test_batch_norm_training_statistics():
    x = np.random.default_rng(0).standard_normal((4, 3, 5, 5)) * 2 + 1
    rm, rv = np.zeros(3), np.ones(3)
    out = F.batch_norm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_batch_norm_eval_identity():
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 4))
    out = F.batch_norm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3),
                         training=False, eps=0.0).data
    np.testing.assert_array_equal(out, x)


def test_batch_norm_running_mean_ema():
    rng = np.random.default_rng(2)
    rm, rv = np.zeros(2), np.ones(2)
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    x1 = rng.standard_normal((3, 2, 4, 4)) + 5
    x2 = rng.standard_normal((3, 2, 4, 4)) - 1
    F.batch_norm2d(Tensor(x1), g, b, rm, rv, training=True, momentum=0.1)
    F.batch_norm2d(Tensor(x2), g, b, rm, rv, training=True, momentum=0.1)
    m1, m2 = x1.mean(axis=(0, 2, 3)), x2.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(rm, 0.9 * (0.9 * 0 + 0.1 * m1) + 0.1 * m2, rtol=1e-12)
    n = 3 * 4 * 4
    v1, v2 = x1.var(axis=(0, 2, 3)) * n / (n - 1), x2.var(axis=(0, 2, 3)) * n / (n - 1)
    np.testing.assert_allclose(rv, 0.9 * (0.9 * 1 + 0.1 * v1) + 0.1 * v2, rtol=1e-12)


def test_batch_norm_degenerate_batch():
    with pytest.raises(ContractError):
        F.batch_norm2d(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       np.zeros(2), np.ones(2), training=True)


# -- activations and loss ------------------------------------------------------

def test_activation_values():
    assert F.gelu(Tensor([0.0])).data.item() == 0.0
    np.testing.assert_array_equal(F.relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])
    np.testing.assert_allclose(F.softmax(Tensor(np.full((1, 4), 2.0))).data, [[0.25] * 4])


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 41)
    expected = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(F.gelu(Tensor(x)).data, expected, rtol=1e-14)


@pytest.mark.parametrize("point", [-2.0, -0.5, 0.5, 2.0])
def test_gelu_gradient_at_points(point):
    assert gradcheck(F.gelu, [np.array([point])]) < 1e-4


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    p = F.softmax(Tensor(x)).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_stable_for_large_logits():
    p = F.softmax(Tensor([[1000.0, 1000.0]])).data
    np.testing.assert_allclose(p, [[0.5, 0.5]])


def test_cross_entropy_uniform_logits():
    loss = F.cross_entropy_loss(Tensor(np.zeros((3, 11))), [0, 5, 10])
    assert loss.item() == pytest.approx(math.log(11), rel=1e-6)
    assert round(math.log(11), 4) == 2.3979


def test_cross_entropy_confident_logits():
    logits = np.full((2, 4), -50.0)
    logits[0, 1] = logits[1, 3] = 50.0
    assert F.cross_entropy_loss(Tensor(logits), [1, 3]).item() < 1e-30


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 3, 2, 4])
    x = Tensor(logits, requires_grad=True)
    with GradTape() as tape:
        loss = F.cross_entropy_loss(x, labels)
    g = backward(loss, tape)[x]
    expected = (F.softmax_np(logits) - np.eye(5)[labels]) / 4
    np.testing.assert_allclose(g, expected, rtol=1e-12)
    assert gradcheck(lambda t: F.cross_entropy_loss(t, labels), [logits.copy()]) < 1e-4


def test_cross_entropy_label_error():
    with pytest.raises(LabelError, match="index 1"):
        F.cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 3])
