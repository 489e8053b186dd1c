"""Dense-tensor neural network layers with hand-written gradients.

Feature maps are float32 numpy arrays laid out (channel, row, col); an extra
leading batch axis is accepted by every op. Convolution weights are
(out_channel, in_channel, krow, kcol). Gradient checking runs the same code
in float64 by passing float64 arrays in.

Backward passes exist for every layer kind that can appear in a trainable
tail (conv3x3, group-norm, relu, the terminal softmax classifier) plus the
down/up-sampling kinds needed to train a base model from scratch.
"""

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigurationError,
    CoordinateError,
    DimensionError,
    EmptyLabelsError,
    UnsupportedLayerError,
)
from .points import LabelPoint

GN_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999

# Layer kinds a trainable tail may contain. "softmax" is the terminal
# classifier: a per-pixel linear map (weight [n_classes, in_channels]) into
# class logits followed by the pixelwise softmax.
TAIL_KINDS = ("conv3x3", "group-norm", "relu", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network; ``name`` prefixes its parameter keys."""

    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    groups: int = 1

    def param_names(self):
        if self.kind in ("conv3x3", "deconv2x2", "softmax"):
            return [self.name + ".weight", self.name + ".bias"]
        if self.kind == "group-norm":
            return [self.name + ".gamma", self.name + ".beta"]
        return []


def _as_batch(x):
    """Return (x as [N,C,H,W], had_batch_axis)."""
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise DimensionError(f"expected 3 or 4 axes, got shape {x.shape}")


def _debatch(y, batched):
    return y if batched else y[0]


# ---------------------------------------------------------------------------
# convolution


def conv2d_forward(x, weight, bias):
    """Valid-padding convolution.

    x: [C_in, H, W] (or batched), weight: [C_out, C_in, k, k], bias: [C_out].
    Output spatial extent shrinks by k - 1.
    """
    x4, batched = _as_batch(x)
    co, ci, kh, kw = weight.shape
    if x4.shape[1] != ci:
        raise DimensionError(
            f"input channel axis is {x4.shape[1]}, weight expects {ci}"
        )
    if bias.shape != (co,):
        raise DimensionError(f"bias axis is {bias.shape}, expected ({co},)")
    if x4.shape[2] < kh or x4.shape[3] < kw:
        raise DimensionError(
            f"spatial axes {x4.shape[2:]} smaller than kernel {kh}x{kw}"
        )
    cols = _im2col(x4, kh)  # [N*Ho*Wo, Ci*k*k]
    n, _, h, w = x4.shape
    ho, wo = h - kh + 1, w - kw + 1
    out = cols @ weight.reshape(co, -1).T + bias
    y = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    return _debatch(np.ascontiguousarray(y), batched)


def _im2col(x4, k):
    n, c, h, w = x4.shape
    win = sliding_window_view(x4, (k, k), axis=(2, 3))  # [N,C,Ho,Wo,k,k]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * (h - k + 1) * (w - k + 1), c * k * k)
    return np.ascontiguousarray(cols)


def conv2d_backward(x, weight, dy):
    """Gradients of conv2d_forward. Returns (dx, dweight, dbias)."""
    x4, batched = _as_batch(x)
    dy4, _ = _as_batch(dy)
    co, ci, k, _ = weight.shape
    n, _, h, w = x4.shape
    ho, wo = h - k + 1, w - k + 1
    dyf = dy4.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    cols = _im2col(x4, k)
    dweight = (dyf.T @ cols).reshape(weight.shape)
    dbias = dyf.sum(axis=0, dtype=np.float64).astype(x4.dtype)
    # dx: full correlation of dy with the kernel flipped in both spatial axes
    # and in/out channels swapped.
    pad = k - 1
    dy_pad = np.pad(dy4, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w_flip = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # [Ci, Co, k, k]
    dx = conv2d_forward(dy_pad, np.ascontiguousarray(w_flip),
                        np.zeros(ci, dtype=x4.dtype))
    return _debatch(dx, batched), dweight, dbias


# ---------------------------------------------------------------------------
# group normalization


def group_norm_forward(x, gamma, beta, groups, eps=GN_EPS, want_cache=False):
    """Normalize per group over (channels-in-group, H, W), then per-channel affine.

    Statistics are accumulated in float64 regardless of input dtype.
    """
    x4, batched = _as_batch(x)
    n, c, h, w = x4.shape
    if c % groups != 0:
        raise ConfigurationError(f"{groups} groups do not divide {c} channels")
    g = x4.reshape(n, groups, c // groups, h, w)
    mean = g.mean(axis=(2, 3, 4), keepdims=True, dtype=np.float64)
    var = np.square(g - mean).mean(axis=(2, 3, 4), keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x4.dtype)
    mean = mean.astype(x4.dtype)
    xhat = ((g - mean) * inv).reshape(n, c, h, w)
    y = xhat * gamma[:, None, None] + beta[:, None, None]
    y = _debatch(y, batched)
    if want_cache:
        return y, (xhat, inv, groups)
    return y


def group_norm_backward(cache, gamma, dy):
    """Gradients of group_norm_forward. Returns (dx, dgamma, dbeta)."""
    xhat, inv, groups = cache
    dy4, batched = _as_batch(dy)
    n, c, h, w = dy4.shape
    xhat4 = xhat if xhat.ndim == 4 else xhat[None]
    dgamma = (dy4 * xhat4).sum(axis=(0, 2, 3), dtype=np.float64).astype(dy4.dtype)
    dbeta = dy4.sum(axis=(0, 2, 3), dtype=np.float64).astype(dy4.dtype)
    dxhat = (dy4 * gamma[:, None, None]).reshape(n, groups, -1)
    xh = xhat4.reshape(n, groups, -1)
    m1 = dxhat.mean(axis=2, keepdims=True, dtype=np.float64).astype(dy4.dtype)
    m2 = (dxhat * xh).mean(axis=2, keepdims=True, dtype=np.float64).astype(dy4.dtype)
    dx = inv.reshape(n, groups, 1) * (dxhat - m1 - xh * m2)
    return _debatch(dx.reshape(n, c, h, w), batched), dgamma, dbeta


# ---------------------------------------------------------------------------
# relu / pooling / deconvolution


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    # gradient defined as 0 at exactly 0
    return dy * (x > 0)


def maxpool2x2_forward(x, want_cache=False):
    """2x2 max pooling, stride 2. Odd trailing rows/cols are dropped."""
    x4, batched = _as_batch(x)
    n, c, h, w = x4.shape
    h2, w2 = h // 2, w // 2
    win = x4[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = flat.argmax(axis=4)  # first max wins: deterministic tie-break
    y = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
    y = _debatch(y, batched)
    if want_cache:
        return y, (arg, x4.shape)
    return y


def maxpool2x2_backward(cache, dy):
    arg, in_shape = cache
    dy4, batched = _as_batch(dy)
    n, c, h, w = in_shape
    h2, w2 = h // 2, w // 2
    dflat = np.zeros((n, c, h2, w2, 4), dtype=dy4.dtype)
    np.put_along_axis(dflat, arg[..., None], dy4[..., None], axis=4)
    dx = np.zeros(in_shape, dtype=dy4.dtype)
    dx[:, :, : 2 * h2, : 2 * w2] = (
        dflat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    )
    return _debatch(dx, batched)


def deconv2x2_forward(x, weight, bias):
    """Transposed 2x2 convolution with stride 2 (doubles the extent).

    weight: [C_in, C_out, 2, 2]. Each input pixel paints one 2x2 output block.
    """
    x4, batched = _as_batch(x)
    ci, co = weight.shape[0], weight.shape[1]
    if x4.shape[1] != ci:
        raise DimensionError(
            f"input channel axis is {x4.shape[1]}, weight expects {ci}"
        )
    n, _, h, w = x4.shape
    t = np.tensordot(x4, weight, axes=([1], [0]))  # [N,H,W,Co,2,2]
    y = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, co, 2 * h, 2 * w)
    y = y + bias[:, None, None]
    return _debatch(np.ascontiguousarray(y), batched)


def deconv2x2_backward(x, weight, dy):
    """Gradients of deconv2x2_forward. Returns (dx, dweight, dbias)."""
    x4, batched = _as_batch(x)
    dy4, _ = _as_batch(dy)
    n, co = dy4.shape[0], weight.shape[1]
    h, w = x4.shape[2], x4.shape[3]
    blocks = dy4.reshape(n, co, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)  # [N,H,W,Co,2,2]
    dx = np.tensordot(blocks, weight, axes=([3, 4, 5], [1, 2, 3]))  # [N,H,W,Ci]
    dx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
    dweight = np.tensordot(x4, blocks, axes=([0, 2, 3], [0, 1, 2]))  # [Ci,Co,2,2]
    dbias = dy4.sum(axis=(0, 2, 3), dtype=np.float64).astype(dy4.dtype)
    return _debatch(dx, batched), dweight.astype(dy4.dtype), dbias


# ---------------------------------------------------------------------------
# softmax classifier head and loss


def classifier_forward(x, weight, bias):
    """Per-pixel linear map into class logits. weight: [n_classes, C_in]."""
    x4, batched = _as_batch(x)
    if x4.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"input channel axis is {x4.shape[1]}, weight expects {weight.shape[1]}"
        )
    logits = np.einsum("nchw,kc->nkhw", x4, weight) + bias[:, None, None]
    return _debatch(logits, batched)


def pixel_softmax(logits):
    """Softmax over the class axis at each pixel; overflow-safe."""
    x4, batched = _as_batch(logits)
    z = x4 - x4.max(axis=1, keepdims=True)
    e = np.exp(z)
    return _debatch(e / e.sum(axis=1, keepdims=True), batched)


def cross_entropy_loss(probs, labels: Iterable[LabelPoint]):
    """Mean of -log p(true class) over the labeled pixels only.

    probs: [n, H, W]; labels carry (row, col, cls) in the probs extent.
    """
    n, h, w = probs.shape
    total = 0.0
    count = 0
    for row, col, cls in labels:
        if not (0 <= row < h and 0 <= col < w):
            raise CoordinateError(f"label at ({row}, {col}) outside {h}x{w} extent")
        if not (0 <= cls < n):
            raise CoordinateError(f"class {cls} out of range for {n} classes")
        # float32 softmax can underflow to exactly 0; keep the loss finite
        total += -np.log(max(np.float64(probs[cls, row, col]), 1e-40))
        count += 1
    if count == 0:
        raise EmptyLabelsError("cross-entropy over an empty label set is undefined")
    return float(total / count)


def softmax_ce_grad(probs, labels: Sequence[LabelPoint]):
    """d(mean CE)/d(logits) for a softmax classifier: (p - onehot)/m at labels."""
    dlogits = np.zeros_like(probs)
    m = len(labels)
    for row, col, cls in labels:
        dlogits[:, row, col] += probs[:, row, col]
        dlogits[cls, row, col] -= 1.0
    return dlogits / m


def batch_ce_loss(probs4, classes):
    """Mean -log p(class) over a batch of single-pixel outputs [N, n, 1, 1]."""
    p = probs4[np.arange(len(classes)), classes, 0, 0]
    return float(-np.log(np.maximum(p.astype(np.float64), 1e-40)).mean())


def batch_ce_grad(probs4, classes):
    dlogits = probs4.copy()
    dlogits[np.arange(len(classes)), classes, 0, 0] -= 1.0
    return dlogits / len(classes)


# ---------------------------------------------------------------------------
# sequential tail execution

# Channel masks (from the dropout search) are keyed by conv layer name and
# multiply that conv's output in both forward and backward.


def tail_forward(layers, params, x, masks=None, want_cache=False):
    """Run a tail layer sequence; returns class probabilities.

    With want_cache=True also returns the per-layer caches needed by
    tail_backward.
    """
    caches = []
    cur = x
    for layer in layers:
        if layer.kind == "conv3x3":
            y = conv2d_forward(cur, params[layer.name + ".weight"], params[layer.name + ".bias"])
            mask = None if masks is None else masks.get(layer.name)
            if mask is not None:
                y = y * _mask_col(mask, y)
            caches.append(("conv3x3", layer, cur, mask))
        elif layer.kind == "group-norm":
            y, gn_cache = group_norm_forward(
                cur, params[layer.name + ".gamma"], params[layer.name + ".beta"],
                layer.groups, want_cache=True)
            caches.append(("group-norm", layer, gn_cache))
        elif layer.kind == "relu":
            y = relu_forward(cur)
            caches.append(("relu", layer, cur))
        elif layer.kind == "softmax":
            logits = classifier_forward(cur, params[layer.name + ".weight"],
                                        params[layer.name + ".bias"])
            y = pixel_softmax(logits)
            caches.append(("softmax", layer, cur, y))
        else:
            raise UnsupportedLayerError(
                f"layer kind '{layer.kind}' has no tail implementation")
        cur = y
    if want_cache:
        return cur, caches
    return cur


def _mask_col(mask, y):
    m = mask.astype(y.dtype)
    return m[:, None, None] if y.ndim == 3 else m[None, :, None, None]


def backward_tail(layers, params, cached_input, labels, trainable, masks=None):
    """Analytic gradients of the tail's cross-entropy loss.

    cached_input: [C, H, W] tail-input features; labels: LabelPoints in the
    tail's output extent. trainable: collection of parameter names to
    differentiate; everything else receives no gradient entry.
    Returns (loss, grads dict).
    """
    probs, caches = _checked_tail_forward(layers, params, cached_input, masks)
    loss = cross_entropy_loss(probs, labels)
    dlogits = softmax_ce_grad(probs, labels)
    grads = _tail_grads_from_dlogits(caches, params, dlogits[None], set(trainable))
    return loss, grads


def backward_tail_batch(layers, params, features, classes, trainable, masks=None):
    """backward_tail over a batch of feature patches with 1x1 outputs.

    features: [N, C, h, w] where the tail maps (h, w) to a single pixel;
    classes: [N] true class per sample. Returns (loss, grads dict).
    """
    probs, caches = _checked_tail_forward(layers, params, features, masks)
    loss = batch_ce_loss(probs, classes)
    dlogits = batch_ce_grad(probs, classes)
    grads = _tail_grads_from_dlogits(caches, params, dlogits, set(trainable))
    return loss, grads


def _checked_tail_forward(layers, params, x, masks):
    if layers[-1].kind != "softmax":
        raise UnsupportedLayerError("tail must end in the softmax classifier")
    for layer in layers:
        if layer.kind not in TAIL_KINDS:
            raise UnsupportedLayerError(
                f"layer kind '{layer.kind}' has no tail backward")
    return tail_forward(layers, params, x, masks=masks, want_cache=True)


def _tail_grads_from_dlogits(caches, params, dlogits4, trainable):
    grads = {}
    dy = None
    for entry in reversed(caches):
        kind, layer = entry[0], entry[1]
        if kind == "softmax":
            x4, _ = _as_batch(entry[2])
            w = params[layer.name + ".weight"]
            if layer.name + ".weight" in trainable:
                grads[layer.name + ".weight"] = np.einsum("nkhw,nchw->kc", dlogits4, x4)
            if layer.name + ".bias" in trainable:
                grads[layer.name + ".bias"] = dlogits4.sum(axis=(0, 2, 3))
            dy = np.einsum("nkhw,kc->nchw", dlogits4, w)
        elif kind == "relu":
            x4, _ = _as_batch(entry[2])
            dy = relu_backward(x4, dy)
        elif kind == "group-norm":
            dy, dgamma, dbeta = group_norm_backward(
                entry[2], params[layer.name + ".gamma"], dy)
            if layer.name + ".gamma" in trainable:
                grads[layer.name + ".gamma"] = dgamma
            if layer.name + ".beta" in trainable:
                grads[layer.name + ".beta"] = dbeta
        elif kind == "conv3x3":
            x_in, mask = entry[2], entry[3]
            x4, _ = _as_batch(x_in)
            if mask is not None:
                dy = dy * mask.astype(dy.dtype)[None, :, None, None]
            dx, dw, db = conv2d_backward(x4, params[layer.name + ".weight"], dy)
            if layer.name + ".weight" in trainable:
                grads[layer.name + ".weight"] = dw
            if layer.name + ".bias" in trainable:
                grads[layer.name + ".bias"] = db
            dy = dx
    return grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state: AdamState, lr, eps=1e-5,
              beta1=ADAM_BETA1, beta2=ADAM_BETA2):
    """One Adam update with bias correction. Returns (new_params, new_state).

    Parameters without a gradient entry are passed through untouched.
    """
    t = state.step + 1
    new_state = AdamState(m=dict(state.m), v=dict(state.v), step=t)
    new_params = dict(params)
    for name, g in grads.items():
        m = new_state.m.get(name)
        v = new_state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * np.square(g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        new_params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + eps)
        new_state.m[name] = m
        new_state.v[name] = v
    return new_params, new_state
