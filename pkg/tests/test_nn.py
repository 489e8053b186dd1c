"""Layer-level checks against naive loop oracles and finite differences."""

import math

import numpy as np
import pytest

from landloop import nn
from landloop.errors import (
    ConfigurationError,
    CoordinateError,
    DimensionError,
    EmptyLabelsError,
    UnsupportedLayerError,
)
from landloop.nn import LayerSpec
from landloop.points import LabelPoint

RNG = np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# oracles: straightforward loop implementations, independent of the library


def conv2d_oracle(x, w, b):
    co, ci, k, _ = w.shape
    _, h, ww = x.shape
    out = np.zeros((co, h - k + 1, ww - k + 1), dtype=np.float64)
    for o in range(co):
        for i in range(h - k + 1):
            for j in range(ww - k + 1):
                acc = float(b[o])
                for c in range(ci):
                    for di in range(k):
                        for dj in range(k):
                            acc += float(w[o, c, di, dj]) * float(x[c, i + di, j + dj])
                out[o, i, j] = acc
    return out


def group_norm_oracle(x, gamma, beta, groups, eps=1e-5):
    c, h, w = x.shape
    per = c // groups
    out = np.zeros_like(x, dtype=np.float64)
    for g in range(groups):
        vals = x[g * per:(g + 1) * per].astype(np.float64)
        mean = vals.mean()
        var = ((vals - mean) ** 2).mean()
        norm = (vals - mean) / math.sqrt(var + eps)
        for ci in range(per):
            out[g * per + ci] = norm[ci] * gamma[g * per + ci] + beta[g * per + ci]
    return out


def maxpool_oracle(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2), dtype=x.dtype)
    for ci in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ci, i, j] = x[ci, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    return out


def deconv_oracle(x, w, b):
    ci, co = w.shape[0], w.shape[1]
    _, h, ww = x.shape
    out = np.zeros((co, 2 * h, 2 * ww), dtype=np.float64)
    for o in range(co):
        out[o] += b[o]
        for c in range(ci):
            for i in range(h):
                for j in range(ww):
                    for di in range(2):
                        for dj in range(2):
                            out[o, 2 * i + di, 2 * j + dj] += float(x[c, i, j]) * float(w[c, o, di, dj])
    return out


# ---------------------------------------------------------------------------
# convolution


def test_conv_zero_input_passes_bias():
    x = np.zeros((1, 3, 3), dtype=np.float32)
    w = RNG.normal(size=(1, 1, 3, 3)).astype(np.float32)
    b = np.array([1.0], dtype=np.float32)
    np.testing.assert_allclose(nn.conv2d_forward(x, w, b), [[[1.0]]])


def test_conv_single_tap():
    x = np.zeros((1, 3, 3), dtype=np.float32)
    x[0, 1, 1] = 2.0
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 3.0
    b = np.array([1.0], dtype=np.float32)
    assert nn.conv2d_forward(x, w, b)[0, 0, 0] == pytest.approx(7.0)


def test_conv_matches_oracle():
    x = RNG.normal(size=(4, 8, 8)).astype(np.float32)
    w = RNG.normal(size=(6, 4, 3, 3)).astype(np.float32)
    b = RNG.normal(size=6).astype(np.float32)
    got = nn.conv2d_forward(x, w, b)
    want = conv2d_oracle(x, w, b)
    assert got.shape == (6, 6, 6)
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_conv_linear_in_input():
    w = RNG.normal(size=(3, 2, 3, 3)).astype(np.float32)
    zero_b = np.zeros(3, dtype=np.float32)
    x = RNG.normal(size=(2, 10, 12)).astype(np.float32)
    y = RNG.normal(size=(2, 10, 12)).astype(np.float32)
    lhs = nn.conv2d_forward(2.5 * x - 1.5 * y, w, zero_b)
    rhs = 2.5 * nn.conv2d_forward(x, w, zero_b) - 1.5 * nn.conv2d_forward(y, w, zero_b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-4)


def test_conv_shape_errors_name_axis():
    x = np.zeros((3, 8, 8), dtype=np.float32)
    w = np.zeros((2, 4, 3, 3), dtype=np.float32)
    with pytest.raises(DimensionError, match="channel"):
        nn.conv2d_forward(x, w, np.zeros(2, dtype=np.float32))
    with pytest.raises(DimensionError, match="bias"):
        nn.conv2d_forward(np.zeros((4, 8, 8), dtype=np.float32), w,
                          np.zeros(3, dtype=np.float32))


# ---------------------------------------------------------------------------
# group norm


def test_group_norm_constant_input_zeroes():
    x = np.full((4, 5, 5), 5.0, dtype=np.float32)
    y = nn.group_norm_forward(x, np.ones(4, np.float32), np.zeros(4, np.float32), 2)
    np.testing.assert_allclose(y, 0.0, atol=1e-6)


def test_group_norm_constant_input_beta():
    x = np.full((4, 5, 5), 5.0, dtype=np.float32)
    gamma = RNG.normal(size=4).astype(np.float32)
    beta = np.array([1.0, -2.0, 0.5, 3.0], dtype=np.float32)
    y = nn.group_norm_forward(x, gamma, beta, 2)
    for c in range(4):
        np.testing.assert_allclose(y[c], beta[c], atol=1e-6)


def test_group_norm_matches_oracle():
    x = RNG.normal(size=(8, 4, 4)).astype(np.float32) * 3 + 1
    gamma = RNG.normal(size=8).astype(np.float32)
    beta = RNG.normal(size=8).astype(np.float32)
    got = nn.group_norm_forward(x, gamma, beta, 2)
    want = group_norm_oracle(x, gamma, beta, 2)
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_group_norm_unit_stats():
    x = (RNG.normal(size=(8, 16, 16)) * 4).astype(np.float32)
    y = nn.group_norm_forward(x, np.ones(8, np.float32), np.zeros(8, np.float32), 4)
    g = y.reshape(4, -1)
    assert np.abs(g.mean(axis=1)).max() <= 1e-5
    np.testing.assert_allclose(g.var(axis=1), 1.0, atol=1e-3)


def test_group_norm_bad_groups():
    x = np.zeros((6, 4, 4), dtype=np.float32)
    with pytest.raises(ConfigurationError):
        nn.group_norm_forward(x, np.ones(6, np.float32), np.zeros(6, np.float32), 4)


# ---------------------------------------------------------------------------
# pooling / deconvolution


def test_maxpool_matches_oracle():
    x = RNG.normal(size=(5, 16, 12)).astype(np.float32)
    np.testing.assert_array_equal(nn.maxpool2x2_forward(x), maxpool_oracle(x))


def test_maxpool_backward_routes_to_argmax():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
    y, cache = nn.maxpool2x2_forward(x, want_cache=True)
    dx = nn.maxpool2x2_backward(cache, np.array([[[7.0]]], dtype=np.float32))
    np.testing.assert_array_equal(dx[0], [[0, 0], [0, 7.0]])


def test_deconv_matches_oracle():
    x = RNG.normal(size=(3, 6, 5)).astype(np.float32)
    w = RNG.normal(size=(3, 4, 2, 2)).astype(np.float32)
    b = RNG.normal(size=4).astype(np.float32)
    np.testing.assert_allclose(nn.deconv2x2_forward(x, w, b),
                               deconv_oracle(x, w, b), atol=1e-5)


def test_forwards_match_oracles_larger():
    x = RNG.normal(size=(16, 32, 32)).astype(np.float32)
    w = RNG.normal(size=(8, 16, 3, 3)).astype(np.float32)
    b = RNG.normal(size=8).astype(np.float32)
    np.testing.assert_allclose(nn.conv2d_forward(x, w, b), conv2d_oracle(x, w, b),
                               atol=1e-5, rtol=1e-4)
    np.testing.assert_array_equal(nn.maxpool2x2_forward(x), maxpool_oracle(x))
    gamma = RNG.normal(size=16).astype(np.float32)
    beta = RNG.normal(size=16).astype(np.float32)
    np.testing.assert_allclose(nn.group_norm_forward(x, gamma, beta, 4),
                               group_norm_oracle(x, gamma, beta, 4), atol=1e-5)
    dw = RNG.normal(size=(16, 4, 2, 2)).astype(np.float32)
    db = RNG.normal(size=4).astype(np.float32)
    np.testing.assert_allclose(nn.deconv2x2_forward(x, dw, db),
                               deconv_oracle(x, dw, db), atol=1e-5, rtol=1e-4)
    logits = (RNG.normal(size=(4, 32, 32)) * 5).astype(np.float32)
    p = nn.pixel_softmax(logits)
    want = np.exp(logits.astype(np.float64))
    want /= want.sum(axis=0, keepdims=True)
    np.testing.assert_allclose(p, want, atol=1e-5)


# ---------------------------------------------------------------------------
# softmax and loss


def test_softmax_uniform():
    logits = np.zeros((4, 1, 1), dtype=np.float32)
    np.testing.assert_allclose(nn.pixel_softmax(logits)[:, 0, 0], 0.25)


def test_softmax_closed_form():
    logits = np.log(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32)).reshape(4, 1, 1)
    np.testing.assert_allclose(nn.pixel_softmax(logits)[:, 0, 0],
                               [0.1, 0.2, 0.3, 0.4], atol=1e-6)


def test_softmax_overflow_safe():
    logits = np.array([1000.0, 0.0, 0.0, 0.0], dtype=np.float32).reshape(4, 1, 1)
    p = nn.pixel_softmax(logits)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p[:, 0, 0], [1, 0, 0, 0], atol=1e-6)


def test_softmax_sums_to_one_random():
    logits = (RNG.normal(size=(4, 9, 7)) * 40).astype(np.float32)
    p = nn.pixel_softmax(logits)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)
    assert p.min() >= 0 and p.max() <= 1.0


def test_cross_entropy_perfect_is_zero():
    probs = np.zeros((4, 2, 2), dtype=np.float32)
    probs[1] = 1.0
    labels = [LabelPoint(0, 0, 1), LabelPoint(1, 1, 1)]
    assert nn.cross_entropy_loss(probs, labels) == pytest.approx(0.0, abs=1e-9)


def test_cross_entropy_uniform_is_ln4():
    probs = np.full((4, 2, 2), 0.25, dtype=np.float32)
    labels = [LabelPoint(0, 1, 2)]
    assert nn.cross_entropy_loss(probs, labels) == pytest.approx(math.log(4), rel=1e-6)


def test_cross_entropy_hand_mean():
    probs = np.zeros((4, 1, 3), dtype=np.float32)
    probs[0, 0, 0] = 0.5
    probs[1, 0, 1] = 0.25
    probs[2, 0, 2] = 0.125
    labels = [LabelPoint(0, 0, 0), LabelPoint(0, 1, 1), LabelPoint(0, 2, 2)]
    want = (math.log(2) + math.log(4) + math.log(8)) / 3
    assert nn.cross_entropy_loss(probs, labels) == pytest.approx(want, rel=1e-6)
    assert want == pytest.approx(2 * math.log(2), rel=1e-12)


def test_cross_entropy_finite_on_underflowed_probs():
    # float32 softmax saturates to exactly {1, 0, ...} at huge margins
    probs = nn.pixel_softmax(np.array([500.0, 0, 0, 0], np.float32).reshape(4, 1, 1))
    assert probs[1, 0, 0] == 0.0
    loss = nn.cross_entropy_loss(probs, [LabelPoint(0, 0, 1)])
    assert np.isfinite(loss)


def test_cross_entropy_errors():
    probs = np.full((4, 2, 2), 0.25, dtype=np.float32)
    with pytest.raises(EmptyLabelsError):
        nn.cross_entropy_loss(probs, [])
    with pytest.raises(CoordinateError):
        nn.cross_entropy_loss(probs, [LabelPoint(2, 0, 1)])
    with pytest.raises(CoordinateError):
        nn.cross_entropy_loss(probs, [LabelPoint(0, 0, 9)])


# ---------------------------------------------------------------------------
# tail backward


def _small_tail(channels=6, classes=4, groups=2, seed=0):
    rng = np.random.default_rng(seed)
    params = {
        "dec0.conv1.weight": rng.normal(size=(channels, channels, 3, 3)) * 0.3,
        "dec0.conv1.bias": rng.normal(size=channels) * 0.1,
        "dec0.conv2.weight": rng.normal(size=(channels, channels, 3, 3)) * 0.3,
        "dec0.conv2.bias": rng.normal(size=channels) * 0.1,
        "dec0.gn.gamma": np.abs(rng.normal(size=channels)) + 0.5,
        "dec0.gn.beta": rng.normal(size=channels) * 0.2,
        "head.weight": rng.normal(size=(classes, channels)) * 0.5,
        "head.bias": rng.normal(size=classes) * 0.1,
    }
    layers = [
        LayerSpec("conv3x3", "dec0.conv1", channels, channels),
        LayerSpec("relu", "dec0.relu1"),
        LayerSpec("conv3x3", "dec0.conv2", channels, channels),
        LayerSpec("group-norm", "dec0.gn", channels, channels, groups=groups),
        LayerSpec("relu", "dec0.relu2"),
        LayerSpec("softmax", "head", channels),
    ]
    return layers, params


def test_backward_tail_zero_grad_at_saturated_onehot():
    layers = [LayerSpec("softmax", "head", 3)]
    params = {
        "head.weight": np.array([[100.0, 0, 0], [0, 100.0, 0], [0, 0, 100.0],
                                 [0, 0, 0]], dtype=np.float64),
        "head.bias": np.zeros(4, dtype=np.float64),
    }
    x = np.zeros((3, 2, 2), dtype=np.float64)
    x[0] = 8.0  # logit margin 800: softmax saturates to an exact one-hot
    labels = [LabelPoint(0, 0, 0), LabelPoint(1, 1, 0)]
    loss, grads = nn.backward_tail(layers, params, x, labels,
                                   ["head.weight", "head.bias"])
    assert loss == 0.0
    assert np.all(grads["head.weight"] == 0)
    assert np.all(grads["head.bias"] == 0)


def test_backward_tail_classifier_closed_form():
    # single linear softmax layer: dW = (p - onehot) x feature^T at the label
    rng = np.random.default_rng(3)
    layers = [LayerSpec("softmax", "head", 5)]
    params = {"head.weight": rng.normal(size=(4, 5)),
              "head.bias": rng.normal(size=4)}
    x = rng.normal(size=(5, 3, 3))
    labels = [LabelPoint(1, 2, 3)]
    loss, grads = nn.backward_tail(layers, params, x, labels,
                                   ["head.weight", "head.bias"])
    f = x[:, 1, 2]
    logits = params["head.weight"] @ f + params["head.bias"]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    want = np.outer(p - np.eye(4)[3], f)
    np.testing.assert_allclose(grads["head.weight"], want, rtol=1e-10)
    np.testing.assert_allclose(grads["head.bias"], p - np.eye(4)[3], rtol=1e-10)


@pytest.mark.parametrize("trainable_kind", ["conv", "gn", "head"])
def test_backward_tail_finite_differences(trainable_kind):
    layers, params = _small_tail()
    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, 12, 12))
    labels = [LabelPoint(int(r), int(c), int(k)) for r, c, k in
              zip(rng.integers(0, 8, 10), rng.integers(0, 8, 10), rng.integers(0, 4, 10))]
    names = {
        "conv": ["dec0.conv1.weight", "dec0.conv1.bias",
                 "dec0.conv2.weight", "dec0.conv2.bias"],
        "gn": ["dec0.gn.gamma", "dec0.gn.beta"],
        "head": ["head.weight", "head.bias"],
    }[trainable_kind]
    _, grads = nn.backward_tail(layers, params, x, labels, names)
    for name in names:
        flat = params[name].reshape(-1)
        gf = grads[name].reshape(-1)
        idxs = rng.choice(flat.size, size=min(12, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + 1e-5
            lp = nn.cross_entropy_loss(nn.tail_forward(layers, params, x), labels)
            flat[i] = orig - 1e-5
            lm = nn.cross_entropy_loss(nn.tail_forward(layers, params, x), labels)
            flat[i] = orig
            fd = (lp - lm) / 2e-5
            assert abs(fd - gf[i]) <= 1e-4 * max(abs(fd), abs(gf[i]), 1e-6), name


def test_backward_tail_untrainable_gets_no_gradient():
    layers, params = _small_tail()
    x = np.random.default_rng(0).normal(size=(6, 8, 8))
    _, grads = nn.backward_tail(layers, params, x, [LabelPoint(0, 0, 1)],
                                ["head.weight"])
    assert set(grads) == {"head.weight"}


def test_backward_tail_rejects_unsupported_layer():
    layers = [LayerSpec("maxpool2x2", "p"), LayerSpec("softmax", "head", 4)]
    params = {"head.weight": np.zeros((4, 4)), "head.bias": np.zeros(4)}
    with pytest.raises(UnsupportedLayerError):
        nn.backward_tail(layers, params, np.zeros((4, 4, 4)), [LabelPoint(0, 0, 0)], [])


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_lr_is_identity():
    params = {"w": np.array([1.0, -2.0, 3.0], dtype=np.float32)}
    grads = {"w": np.array([0.5, 0.5, 0.5], dtype=np.float32)}
    out, state = nn.adam_step(params, grads, nn.AdamState(), lr=0.0)
    assert np.array_equal(out["w"], params["w"])
    assert state.step == 1


def test_adam_zero_grad_is_identity():
    params = {"w": np.array([1.0, 2.0], dtype=np.float64)}
    out, _ = nn.adam_step(params, {"w": np.zeros(2)}, nn.AdamState(), lr=0.1)
    assert np.array_equal(out["w"], params["w"])


def test_adam_single_step_hand_calc():
    params = {"w": np.array([1.0])}
    grads = {"w": np.array([1.0])}
    eps = 1e-5
    out, state = nn.adam_step(params, grads, nn.AdamState(), lr=0.01, eps=eps)
    # bias-corrected mhat = vhat = 1 at step 1, so the update is lr/(1+eps)
    want = 1.0 - 0.01 * 1.0 / (1.0 + eps)
    assert out["w"][0] == pytest.approx(want, rel=1e-12)
    assert out["w"][0] == pytest.approx(0.99, abs=1e-4)
    assert state.step == 1


def test_adam_missing_grads_pass_through():
    params = {"a": np.ones(2), "b": np.ones(2)}
    out, _ = nn.adam_step(params, {"a": np.ones(2)}, nn.AdamState(), lr=0.1)
    assert out["b"] is params["b"]
    assert not np.array_equal(out["a"], params["a"])
