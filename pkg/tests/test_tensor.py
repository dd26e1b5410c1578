import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metakernel.tensor import (ShapeError, Tape, Tensor, add, backward, channel_affine, conv2d,
                               cross_entropy, depthwise_conv2d, finite_diff_check, global_avg_pool,
                               linear, log, log_softmax, matmul, mean, mul, relu, reshape, scale,
                               softmax, sub, tsum)

from oracles import conv2d_loop, depthwise_loop, numeric_grad


def test_identity_kernel_returns_input():
    x = np.ones((1, 1, 3, 3))
    out = conv2d(x, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(out.data, x)


def test_ramp_window_sum():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = conv2d(x, np.ones((1, 1, 3, 3)), 1, 1)
    # oracle: brute-force window sum
    assert out.data[0, 0, 1, 1] == conv2d_loop(x, np.ones((1, 1, 3, 3)), 1, (1, 1))[0, 0, 1, 1] == 45.0


def test_zero_kernel_annihilates():
    x = np.random.default_rng(0).normal(size=(2, 3, 6, 5))
    out = conv2d(x, np.zeros((4, 3, 3, 3)), 2, 1)
    assert not out.data.any()


@pytest.mark.parametrize("stride,pad", [(1, (0, 0)), (1, (1, 2)), (2, (1, 1)), (2, (0, 3))])
def test_conv2d_matches_loop(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad[1])
    x = rng.normal(size=(2, 3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 5))
    np.testing.assert_allclose(conv2d(x, k, stride, pad).data, conv2d_loop(x, k, stride, pad),
                               rtol=1e-12, atol=1e-12)


def test_conv_output_extent():
    out = conv2d(np.zeros((1, 1, 9, 8)), np.zeros((1, 1, 3, 5)), 2, (1, 0))
    assert out.shape == (1, 1, (9 + 2 - 3) // 2 + 1, (8 - 5) // 2 + 1)


def test_depthwise_centered_delta_is_identity():
    x = np.random.default_rng(1).normal(size=(1, 2, 5, 5))
    for k in (3, 5):
        kern = np.zeros((2, 1, k, k))
        kern[:, 0, k // 2, k // 2] = 1.0
        np.testing.assert_array_equal(depthwise_conv2d(x, kern, 1, (k - 1) // 2).data, x)


def test_depthwise_single_channel_equals_conv():
    rng = np.random.default_rng(2)
    x, k = rng.normal(size=(2, 1, 6, 6)), rng.normal(size=(1, 1, 3, 3))
    np.testing.assert_allclose(depthwise_conv2d(x, k, 2, 1).data, conv2d(x, k, 2, 1).data, rtol=0, atol=1e-14)


def test_depthwise_matches_loop():
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 1, 3, 3))
    np.testing.assert_allclose(depthwise_conv2d(x, k, 1, 1).data, depthwise_loop(x, k, 1, (1, 1)),
                               rtol=1e-12, atol=1e-13)


def test_depthwise_channels_independent():
    rng = np.random.default_rng(4)
    x, k = rng.normal(size=(1, 3, 6, 6)), rng.normal(size=(3, 1, 3, 3))
    base = depthwise_conv2d(x, k, 1, 1).data
    x2 = x.copy()
    x2[:, 1] += 5.0
    out = depthwise_conv2d(x2, k, 1, 1).data
    np.testing.assert_array_equal(out[:, [0, 2]], base[:, [0, 2]])


def test_conv_errors():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 1, 5, 5)), np.zeros((1, 1, 2, 2)), 1, "same")
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 1, 5, 5)), np.zeros((1, 1, 3, 3)), 3)
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)))
    with pytest.raises(ShapeError):
        depthwise_conv2d(np.zeros((1, 2, 5, 5)), np.zeros((3, 1, 3, 3)))


def test_softmax_uniform():
    p = softmax(np.zeros(7)).data
    np.testing.assert_allclose(p, np.full(7, 1 / 7), rtol=0, atol=1e-16)


def test_cross_entropy_examples():
    logits = np.full((3, 10), -1e3)
    labels = np.array([1, 4, 9])
    logits[np.arange(3), labels] = 1e3
    assert cross_entropy(logits, labels).item() == 0.0
    probs = np.full((2, 10), 0.1)
    ce = cross_entropy(probs, np.array([0, 3]), from_logits=False).item()
    assert ce == pytest.approx(math.log(10), abs=1e-12)
    assert cross_entropy(np.zeros((2, 10)), np.array([0, 3])).item() == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="label out of range"):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError, match="label out of range"):
        cross_entropy(np.zeros((2, 3)), np.array([-1, 0]))


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
    grads = backward(loss, tape)
    np.testing.assert_array_equal(grads[x], np.ones((2, 3, 4)))


def test_backward_unreached_leaf_gets_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        loss = tsum(scale(x, 2.0))
    grads = backward(loss, tape, wrt=[x, y])
    np.testing.assert_array_equal(grads[x], np.full(3, 2.0))
    np.testing.assert_array_equal(grads[y], np.zeros(4))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = scale(x, 2.0)
    with pytest.raises(ShapeError):
        backward(y, tape)


def test_reused_leaf_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = tsum(add(mul(x, x), x))
    np.testing.assert_array_equal(backward(loss, tape)[x], 2 * x.data + 1)


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 3, 7, 7)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 1, 5, 5)), requires_grad=True)

    def grads():
        with Tape() as tape:
            loss = tsum(relu(depthwise_conv2d(x, k, 2, 2)))
        g = backward(loss, tape)
        return g[x].copy(), g[k].copy()

    a, b = grads(), grads()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def _check(f, tensors, tol=1e-7):
    assert finite_diff_check(f, tensors, eps=1e-6) < tol


def test_gradients_of_elementwise_ops():
    rng = np.random.default_rng(6)
    a = Tensor(rng.normal(size=(3, 4)) + 0.1, requires_grad=True)
    b = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    _check(lambda _: tsum(mul(add(a, b), sub(a, b))), [a, b])
    _check(lambda _: tsum(mul(relu(a), a)), [a])
    _check(lambda _: mean(log(pos)), [pos])
    _check(lambda _: tsum(mul(softmax(a, axis=1), pos)), [a])
    _check(lambda _: tsum(mul(log_softmax(a, axis=0), pos)), [a])
    w = np.linspace(-1.0, 1.0, 9).reshape(3, 3)
    _check(lambda _: tsum(mul(matmul(a, reshape(pos, (4, 3))), w)), [a, pos])


def test_gradients_of_layers():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    g = Tensor(rng.normal(size=3), requires_grad=True)
    bt = Tensor(rng.normal(size=3), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    bias = Tensor(rng.normal(size=2), requires_grad=True)
    labels = np.array([1, 0])
    _check(lambda _: tsum(mul(conv2d(x, k, 2, 1), np.linspace(-1, 1, 4 * 9).reshape(1, 4, 3, 3))), [x, k])
    _check(lambda _: cross_entropy(linear(global_avg_pool(channel_affine(x, g, bt)), w, bias), labels),
           [x, g, bt, w, bias])


def test_finite_diff_check_detects_wrong_gradient():
    from metakernel.tensor import _emit

    def bad_square(t):
        return _emit("bad", t.data ** 2, (t,), lambda g: (g * t.data,))   # missing factor 2

    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    assert finite_diff_check(lambda _: tsum(bad_square(x)), x) > 0.4


def test_finite_diff_eps_range():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        finite_diff_check(lambda _: tsum(x), x, eps=0.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 8), st.integers(3, 8),
       st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]), st.integers(0, 2**31 - 1))
def test_conv_shape_and_finiteness(b, c, h, w, k, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, c, h, w))
    kern = rng.normal(size=(2, c, k, k))
    pad = (k - 1) // 2
    out = conv2d(x, kern, stride, pad)
    assert out.shape == (b, 2, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
    assert out.size == int(np.prod(out.shape)) and np.isfinite(out.data).all()


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.sampled_from([1, 3]), st.sampled_from([1, 2]), st.integers(0, 2**31 - 1))
def test_depthwise_backward_matches_numeric(c, k, stride, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, c, 5, 5)), requires_grad=True)
    kern = Tensor(rng.normal(size=(c, 1, k, k)), requires_grad=True)
    r = rng.normal(size=depthwise_conv2d(x, kern, stride, k // 2).shape)
    with Tape() as tape:
        loss = tsum(mul(depthwise_conv2d(x, kern, stride, k // 2), r))
    g = backward(loss, tape)
    f = lambda: float(np.sum(depthwise_conv2d(x.data, kern.data, stride, k // 2).data * r))
    np.testing.assert_allclose(g[x], numeric_grad(f, x.data), atol=1e-7)
    np.testing.assert_allclose(g[kern], numeric_grad(f, kern.data), atol=1e-7)
