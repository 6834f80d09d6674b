import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slca.errors import NumericError, RejectedInputError
from slca.nn import functional as F

import oracles


def test_identity_1x1_conv():
    x = np.arange(12, dtype=np.float32).reshape(1, 1, 3, 4)
    y = F.conv2d(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    assert np.max(np.abs(y - x)) < 1e-7


def test_zero_conv_then_relu_is_zero(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    y = F.relu(F.conv2d(x, np.zeros((4, 3, 3, 3)), np.zeros(4), padding=1))
    assert not y.any()


def test_ones_kernel_counts_receptive_field():
    y = F.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), stride=1, padding=1)[0, 0]
    assert y[1, 1] == 9
    assert y[0, 0] == y[0, 2] == y[2, 0] == y[2, 2] == 4
    assert y[0, 1] == y[1, 0] == y[1, 2] == y[2, 1] == 6


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 1)])
def test_conv_matches_loop_oracle(rng, stride, padding, k):
    for _ in range(20):
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        np.testing.assert_allclose(F.conv2d(x, w, b, stride, padding), oracles.conv2d(x, w, b, stride, padding),
                                   rtol=1e-10, atol=1e-10)


def test_conv_rejects_bad_shapes_and_nan():
    with pytest.raises(RejectedInputError):
        F.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(RejectedInputError):
        F.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))
    with pytest.raises(NumericError):
        F.conv2d(np.full((1, 1, 4, 4), np.nan), np.zeros((1, 1, 3, 3)))


def test_relu_examples(rng):
    np.testing.assert_array_equal(F.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert not F.relu(-np.ones(5)).any()
    x = rng.standard_normal(100)
    np.testing.assert_array_equal(F.relu(x), [v if v > 0 else 0.0 for v in x])


def test_sigmoid_values():
    assert F.sigmoid(np.array(0.0)) == 0.5
    assert abs(F.sigmoid(np.array(40.0)) - 1) < 1e-6
    assert abs(F.sigmoid(np.array(-40.0))) < 1e-6
    assert abs(F.sigmoid(np.array(1.0)) - 1 / (1 + math.exp(-1))) < 1e-12
    assert abs(F.sigmoid(np.array(1.0)) - 0.731059) < 1e-5


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_sigmoid_open_interval(v):
    for dtype in (np.float32, np.float64):
        s = F.sigmoid(np.array([v], dtype=dtype))[0]
        assert 0 < s < 1


def test_slap_examples():
    x = np.zeros((1, 1, 4, 4))
    x[0, 0, :2, :2], x[0, 0, :2, 2:], x[0, 0, 2:, :2], x[0, 0, 2:, 2:] = 1, 2, 3, 4
    np.testing.assert_array_equal(F.slap(x, 2)[0, 0], [[1, 2], [3, 4]])
    y = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(F.slap(y, 4), y, atol=1e-12)
    np.testing.assert_allclose(F.slap(np.full((1, 2, 7, 5), 3.5), 3), 3.5, atol=1e-12)
    with pytest.raises(RejectedInputError):
        F.slap(y, 5)


def test_slap_matches_oracle_on_uneven_partitions(rng):
    for _ in range(100):
        h, w = rng.integers(1, 10, size=2)
        g = int(rng.integers(1, min(h, w) + 1))
        x = rng.standard_normal((1, 2, h, w))
        np.testing.assert_allclose(F.slap(x, g), oracles.slap(x, g), atol=1e-12)


def test_slap_then_upsample_preserves_mean(rng):
    x = rng.standard_normal((3, 2, 8, 8))
    back = F.upsample_nearest(F.slap(x, 4), 8, 8)
    assert np.max(np.abs(back.mean(axis=(1, 2, 3)) - x.mean(axis=(1, 2, 3)))) < 1e-6


def test_bilinear_2x2_to_4x4():
    x = np.array([[0.0, 1.0], [2.0, 3.0]])
    got = F.resize_bilinear(x[None, None], 4, 4)[0, 0]
    np.testing.assert_allclose(got, oracles.bilinear_sample(x, 4, 4), atol=1e-12)
    np.testing.assert_allclose(got[0], [0, 0.25, 0.75, 1.0])
    np.testing.assert_allclose(got[:, 0], [0, 0.5, 1.5, 2.0])


def test_bilinear_identity_and_constant(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    np.testing.assert_array_equal(F.resize_bilinear(x, 5, 6), x)
    np.testing.assert_allclose(F.resize_bilinear(np.full((1, 1, 3, 3), 2.5), 7, 4), 2.5, atol=1e-12)


def test_bilinear_matches_oracle(rng):
    for _ in range(100):
        h, w, ho, wo = rng.integers(1, 9, size=4)
        x = rng.standard_normal((h, w))
        np.testing.assert_allclose(F.resize_bilinear(x[None, None], ho, wo)[0, 0],
                                   oracles.bilinear_sample(x, ho, wo), atol=1e-10)


def test_upsample_nearest_examples(rng):
    got = F.upsample_nearest(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 4, 4)[0, 0]
    np.testing.assert_array_equal(got, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    x = rng.standard_normal((1, 1, 3, 3))
    np.testing.assert_array_equal(F.upsample_nearest(x, 3, 3), x)
    np.testing.assert_array_equal(F.upsample_nearest(x, 5, 5)[0, 0], oracles.upsample_nearest(x[0, 0], 5, 5))


def test_upsample_nearest_matches_oracle(rng):
    for _ in range(100):
        h, w, ho, wo = rng.integers(1, 9, size=4)
        x = rng.standard_normal((h, w))
        np.testing.assert_array_equal(F.upsample_nearest(x[None, None], ho, wo)[0, 0],
                                      oracles.upsample_nearest(x, ho, wo))


def test_global_avg_pool(rng):
    np.testing.assert_allclose(F.global_avg_pool(np.full((2, 3, 4, 4), 1.5)), 1.5)
    x = rng.standard_normal((2, 3, 1, 1))
    np.testing.assert_array_equal(F.global_avg_pool(x), x[:, :, 0, 0])
    x = rng.standard_normal((2, 3, 5, 4))
    loop = [[sum(x[n, c].ravel()) / 20 for c in range(3)] for n in range(2)]
    assert np.max(np.abs(F.global_avg_pool(x) - loop)) < 1e-6


def test_linear(rng):
    x = rng.standard_normal((2, 3))
    np.testing.assert_allclose(F.linear(x, np.eye(3), np.zeros(3)), x)
    b = rng.standard_normal(4)
    np.testing.assert_allclose(F.linear(x, np.zeros((4, 3)), b), np.tile(b, (2, 1)))
    w = rng.standard_normal((4, 3))
    loop = [[sum(x[i, d] * w[k, d] for d in range(3)) + b[k] for k in range(4)] for i in range(2)]
    np.testing.assert_allclose(F.linear(x, w, b), loop, atol=1e-12)


def test_cross_entropy_values(rng):
    loss, _ = F.softmax_cross_entropy(np.zeros((3, 5)), np.array([0, 1, 4]))
    assert abs(loss - math.log(5)) < 1e-12
    logits = np.zeros((2, 4))
    logits[[0, 1], [2, 3]] = 100
    assert F.softmax_cross_entropy(logits, np.array([2, 3]))[0] < 1e-6
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 1])
    shift = logits + rng.standard_normal((4, 1)) * 50
    assert abs(F.softmax_cross_entropy(logits, labels)[0] - F.softmax_cross_entropy(shift, labels)[0]) < 1e-9
    with pytest.raises(RejectedInputError):
        F.softmax_cross_entropy(logits, np.array([0, 3, 1, 1]))


def test_cross_entropy_gradient_matches_differences(rng):
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, size=5)
    _, grad = F.softmax_cross_entropy(logits, labels)
    eps = 1e-6
    for idx in np.ndindex(*logits.shape):
        p, m = logits.copy(), logits.copy()
        p[idx] += eps
        m[idx] -= eps
        num = (F.softmax_cross_entropy(p, labels)[0] - F.softmax_cross_entropy(m, labels)[0]) / (2 * eps)
        assert abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), 1e-8) < 1e-4


def test_batchnorm_eval_is_deterministic_affine(rng):
    x = rng.standard_normal((4, 3, 2, 2))
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    a, _ = F.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), training=False)
    b, _ = F.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), training=False)
    np.testing.assert_array_equal(a, b)
    expect = gamma[None, :, None, None] * (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5) \
        + beta[None, :, None, None]
    np.testing.assert_allclose(a, expect, atol=1e-12)


def test_batchnorm_training_updates_running_stats(rng):
    x = rng.standard_normal((8, 2, 3, 3)) * 3 + 1
    rm, rv = np.zeros(2), np.ones(2)
    F.batchnorm_forward(x, np.ones(2), np.zeros(2), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))
    assert (rv >= 0).all()


def _numeric_input_grad(f, x, dout, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        p, m = x.copy(), x.copy()
        p[idx] += eps
        m[idx] -= eps
        g[idx] = np.sum((f(p) - f(m)) * dout) / (2 * eps)
    return g


@pytest.mark.parametrize("name", ["conv", "bn", "slap", "bilinear", "nearest", "gap", "relu", "sigmoid"])
def test_backward_kernels_match_differences(rng, name):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
    cases = {
        "conv": (lambda v: F.conv2d_forward(v, w, None, 2, 1),
                 lambda d, c: F.conv2d_backward(d, c)[0]),
        "bn": (lambda v: F.batchnorm_forward(v, gamma, beta, np.zeros(3), np.ones(3), True),
               lambda d, c: F.batchnorm_backward(d, c)[0]),
        "slap": (lambda v: F.slap_forward(v, 2), F.slap_backward),
        "bilinear": (lambda v: F.resize_bilinear_forward(v, 7, 3), F.resize_bilinear_backward),
        "nearest": (lambda v: F.upsample_nearest_forward(v, 8, 7), F.upsample_nearest_backward),
        "gap": (lambda v: (F.global_avg_pool(v), v.shape), F.global_avg_pool_backward),
        "relu": (lambda v: (F.relu(v), v), F.relu_backward),
        "sigmoid": (lambda v: (F.sigmoid(v), F.sigmoid(v)), F.sigmoid_backward),
    }
    fwd, bwd = cases[name]
    out, cache = fwd(x)
    dout = rng.standard_normal(out.shape)
    analytic = bwd(dout, cache)
    numeric = _numeric_input_grad(lambda v: fwd(v)[0], x, dout)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    assert rel.max() < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 5))
def test_slap_bounds_cover_every_row_once(h, w, g):
    if g > min(h, w):
        with pytest.raises(RejectedInputError):
            F.slap(np.zeros((1, 1, h, w)), g)
        return
    out = F.slap(np.ones((1, 1, h, w)), g)
    assert out.shape == (1, 1, g, g)
    np.testing.assert_allclose(out, 1.0)
