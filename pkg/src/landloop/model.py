"""Encoder-decoder segmentation network: assembly, forward, training, checkpoints.

The network is a U-shaped encoder-decoder with skip connections. Each level
holds two valid-padded 3x3 convolutions with group normalization after the
second one; 2x2 max-pooling goes down, 2x2 transposed convolution goes up,
and filter counts double per level. A per-pixel linear softmax classifier
sits on top. Because padding is valid everywhere, the predicted extent is
smaller than the input and offset inward by a fixed margin.

Two profiles are used in practice: the "desk" profile (depth 2, 8 base
filters) that trains in seconds on synthetic scenes, and the full-size
"paper" profile (depth 4, 32 base filters). Both share layer kinds, so every
fine-tuning pathway is exercised at desk scale.
"""

import io
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import nn
from .errors import (
    ChecksumError,
    ConfigurationError,
    DimensionError,
    ExtentError,
    FormatError,
    VersionError,
)
from .nn import LayerSpec

CHECKPOINT_MAGIC = b"GLCK"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {0: np.float32, 1: np.float64, 2: np.uint8}
_DTYPE_IDS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description. ``bottleneck_filters`` is derived."""

    depth: int = 2
    base_filters: int = 8
    classes: int = 4
    channels: int = 4
    groups: int = 4
    profile: str = "custom"

    @classmethod
    def desk(cls):
        return cls(depth=2, base_filters=8, classes=4, channels=4, groups=4,
                   profile="desk")

    @classmethod
    def paper(cls):
        return cls(depth=4, base_filters=32, classes=4, channels=4, groups=32,
                   profile="paper")

    @property
    def bottleneck_filters(self):
        return self.base_filters * 2 ** self.depth

    def level_filters(self, d):
        return self.base_filters * 2 ** d

    @property
    def head_in_channels(self):
        # top decoder block concatenates the skip onto the upsampled features
        return 2 * self.base_filters

    def to_header(self):
        return {
            "depth": str(self.depth),
            "base_filters": str(self.base_filters),
            "classes": str(self.classes),
            "channels": str(self.channels),
            "groups": str(self.groups),
            "profile": self.profile,
        }

    @classmethod
    def from_header(cls, h):
        return cls(depth=int(h["depth"]), base_filters=int(h["base_filters"]),
                   classes=int(h["classes"]), channels=int(h["channels"]),
                   groups=int(h["groups"]), profile=h.get("profile", "custom"))


# ---------------------------------------------------------------------------
# extent geometry
#
# Valid padding shrinks each 3x3 conv by 2; pooling halves; deconv doubles.
# An input extent is supported when every pooled extent is even and every
# skip crop is symmetric, which keeps the output centered: the input-to-output
# offset is then a constant of the ModelSpec.


def _trace_extent(spec: ModelSpec, n: int):
    """Follow one spatial dimension through the network; None if unsupported."""
    e = n
    skips = []
    for _ in range(spec.depth):
        e -= 4
        if e < 2 or e % 2 != 0:
            return None
        skips.append(e)
        e //= 2
    e -= 4
    if e < 1:
        return None
    for d in reversed(range(spec.depth)):
        e *= 2
        crop = skips[d] - e
        if crop < 0 or crop % 2 != 0:
            return None
        e -= 4
        if e < 1:
            return None
    return e


def is_valid_extent(spec: ModelSpec, n: int) -> bool:
    return _trace_extent(spec, n) is not None


def min_input_extent(spec: ModelSpec) -> int:
    n = 8
    while _trace_extent(spec, n) is None:
        n += 1
        if n > 4096:
            raise ConfigurationError("no supported input extent below 4096")
    return n


def output_extent(spec: ModelSpec, n: int) -> int:
    e = _trace_extent(spec, n)
    if e is None:
        raise ExtentError(
            f"input extent {n} unsupported; minimum is {min_input_extent(spec)} "
            f"and extents must keep pooled sizes even",
            min_extent=min_input_extent(spec),
        )
    return e


def input_output_offset(spec: ModelSpec) -> int:
    """Margin between input and output rasters, per side, in pixels."""
    n = min_input_extent(spec)
    return (n - output_extent(spec, n)) // 2


def snap_extent(spec: ModelSpec, n: int, mode="down") -> int:
    """Largest supported extent <= n (mode="down") or smallest >= n ("up")."""
    lo = min_input_extent(spec)
    if mode == "down":
        m = max(n, lo)
        while m >= lo:
            if is_valid_extent(spec, m):
                return m
            m -= 1
        return lo
    m = max(n, lo)
    while not is_valid_extent(spec, m):
        m += 1
    return m


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """Weights for one model; treated as immutable once built.

    ``masks`` holds per-channel binary dropout masks (from the genetic mask
    search) keyed by conv layer name; absent means identity.
    """

    spec: ModelSpec
    tensors: dict
    masks: Optional[dict] = None

    @property
    def n_classes(self):
        return self.tensors["head.weight"].shape[0]

    def fingerprint(self) -> int:
        crc = 0
        for name in sorted(self.tensors):
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(self.tensors[name]).tobytes(), crc)
        if self.masks:
            for name in sorted(self.masks):
                crc = zlib.crc32(name.encode(), crc)
                crc = zlib.crc32(np.ascontiguousarray(self.masks[name]).tobytes(), crc)
        return crc

    def with_tensors(self, updates: dict) -> "ModelParams":
        tensors = dict(self.tensors)
        tensors.update(updates)
        return ModelParams(spec=self.spec, tensors=tensors, masks=self.masks)

    def with_masks(self, masks: Optional[dict]) -> "ModelParams":
        return ModelParams(spec=self.spec, tensors=dict(self.tensors), masks=masks)


def _block_channels(spec: ModelSpec):
    """(enc, bott, dec, head_in) channel plan.

    enc[d] = (in, out); dec[d] = (deconv_in, deconv_out, block_channels).
    """
    enc = []
    for d in range(spec.depth):
        cin = spec.channels if d == 0 else spec.level_filters(d - 1)
        enc.append((cin, spec.level_filters(d)))
    bott = (spec.level_filters(spec.depth - 1), spec.bottleneck_filters)
    dec = {}
    for d in reversed(range(spec.depth)):
        up_in = spec.bottleneck_filters if d == spec.depth - 1 else 2 * spec.level_filters(d + 1)
        fd = spec.level_filters(d)
        dec[d] = (up_in, fd, 2 * fd)
    return enc, bott, dec


def conv_layer_names(spec: ModelSpec):
    """All conv-type layers in forward order (the head counts as the last one)."""
    names = []
    for d in range(spec.depth):
        names += [f"enc{d}.conv1", f"enc{d}.conv2"]
    names += ["bott.conv1", "bott.conv2"]
    for d in reversed(range(spec.depth)):
        names += [f"dec{d}.conv1", f"dec{d}.conv2"]
    names.append("head")
    return names


def total_conv_layers(spec: ModelSpec) -> int:
    return len(conv_layer_names(spec))


def init_params(spec: ModelSpec, seed: int, n_classes: Optional[int] = None) -> ModelParams:
    """He-uniform conv weights, zero biases, unit gamma / zero beta."""
    if n_classes is None:
        n_classes = spec.classes
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed).spawn(1)[0]))
    tensors = {}

    def conv(name, cin, cout, k=3):
        lim = np.sqrt(6.0 / (cin * k * k))
        tensors[name + ".weight"] = rng.uniform(-lim, lim, size=(cout, cin, k, k)).astype(np.float32)
        tensors[name + ".bias"] = np.zeros(cout, dtype=np.float32)

    def deconv(name, cin, cout):
        lim = np.sqrt(6.0 / (cin * 4))
        tensors[name + ".weight"] = rng.uniform(-lim, lim, size=(cin, cout, 2, 2)).astype(np.float32)
        tensors[name + ".bias"] = np.zeros(cout, dtype=np.float32)

    def gn(name, c):
        tensors[name + ".gamma"] = np.ones(c, dtype=np.float32)
        tensors[name + ".beta"] = np.zeros(c, dtype=np.float32)

    enc, bott, dec = _block_channels(spec)
    for d, (cin, cout) in enumerate(enc):
        conv(f"enc{d}.conv1", cin, cout)
        conv(f"enc{d}.conv2", cout, cout)
        gn(f"enc{d}.gn", cout)
    conv("bott.conv1", bott[0], bott[1])
    conv("bott.conv2", bott[1], bott[1])
    gn("bott.gn", bott[1])
    for d in reversed(range(spec.depth)):
        up_in, up_out, cblk = dec[d]
        deconv(f"dec{d}.deconv", up_in, up_out)
        conv(f"dec{d}.conv1", cblk, cblk)
        conv(f"dec{d}.conv2", cblk, cblk)
        gn(f"dec{d}.gn", cblk)
    lim = np.sqrt(6.0 / spec.head_in_channels)
    tensors["head.weight"] = rng.uniform(-lim, lim, size=(n_classes, spec.head_in_channels)).astype(np.float32)
    tensors["head.bias"] = np.zeros(n_classes, dtype=np.float32)
    return ModelParams(spec=spec, tensors=tensors)


# ---------------------------------------------------------------------------
# forward


def _center_crop(x, h, w):
    th = (x.shape[-2] - h) // 2
    tl = (x.shape[-1] - w) // 2
    return x[..., th:th + h, tl:tl + w], th, tl


def _apply_mask(params, name, y):
    if params.masks and name in params.masks:
        m = params.masks[name].astype(y.dtype)
        return y * (m[:, None, None] if y.ndim == 3 else m[None, :, None, None])
    return y


def _run_network(params: ModelParams, x, cut=None, tape=None):
    """Shared forward: full probabilities, or features at a tail cut.

    cut: None for the full pass, or 1/2/3 to stop at the matching tail input.
    tape: list collecting backward records (training mode).
    """
    spec = params.spec
    t = params.tensors
    rec = tape.append if tape is not None else (lambda *_: None)

    def conv_unit(name, cur):
        y = nn.conv2d_forward(cur, t[name + ".weight"], t[name + ".bias"])
        y = _apply_mask(params, name, y)
        rec(("conv", name, cur))
        return y

    def relu_unit(cur):
        y = nn.relu_forward(cur)
        rec(("relu", cur))
        return y

    def gn_unit(name, cur):
        y, cache = nn.group_norm_forward(cur, t[name + ".gamma"], t[name + ".beta"],
                                         spec.groups, want_cache=True)
        rec(("gn", name, cache))
        return y

    skips = []
    cur = x
    for d in range(spec.depth):
        cur = relu_unit(conv_unit(f"enc{d}.conv1", cur))
        cur = relu_unit(gn_unit(f"enc{d}.gn", conv_unit(f"enc{d}.conv2", cur)))
        skips.append(cur)
        rec(("skip-save", d))
        cur, pcache = nn.maxpool2x2_forward(cur, want_cache=True)
        rec(("pool", pcache))
    cur = relu_unit(conv_unit("bott.conv1", cur))
    cur = relu_unit(gn_unit("bott.gn", conv_unit("bott.conv2", cur)))
    for d in reversed(range(spec.depth)):
        up = nn.deconv2x2_forward(cur, t[f"dec{d}.deconv.weight"], t[f"dec{d}.deconv.bias"])
        rec(("deconv", f"dec{d}.deconv", cur))
        cropped, th, tl = _center_crop(skips[d], up.shape[-2], up.shape[-1])
        cur = np.concatenate([cropped, up], axis=-3)
        rec(("concat", d, skips[d].shape, th, tl, cropped.shape[-3]))
        if d == 0 and cut == 3:
            return cur
        cur = relu_unit(conv_unit(f"dec{d}.conv1", cur))
        if d == 0 and cut == 2:
            return cur
        cur = relu_unit(gn_unit(f"dec{d}.gn", conv_unit(f"dec{d}.conv2", cur)))
        if d == 0 and cut == 1:
            return cur
    logits = nn.classifier_forward(cur, t["head.weight"], t["head.bias"])
    probs = nn.pixel_softmax(logits)
    rec(("head", cur, probs))
    return probs


def _check_extent(spec: ModelSpec, image):
    if image.shape[-3] != spec.channels:
        raise DimensionError(
            f"image channel axis is {image.shape[-3]}, model expects {spec.channels}")
    return output_extent(spec, image.shape[-2]), output_extent(spec, image.shape[-1])


def forward(params: ModelParams, image) -> np.ndarray:
    """Per-pixel class distributions for an image, [n, H', W'].

    The output is smaller than the input: output pixel (i, j) predicts input
    pixel (i + off, j + off) with off = input_output_offset(spec).
    """
    _check_extent(params.spec, image)
    return _run_network(params, image)


def extract_features(params: ModelParams, image, k: int) -> np.ndarray:
    """Activations feeding the trainable tail at cut k.

    k counts conv layers from the output: 1 = classifier input, 2 = input of
    the last 3x3 conv, 3 = input of the second-to-last. k equal to the total
    conv-layer count degenerates to the raw image (empty trunk).
    """
    if k == total_conv_layers(params.spec):
        return image
    if k not in (1, 2, 3):
        raise ConfigurationError(
            f"tail cut must be 1, 2, 3 or {total_conv_layers(params.spec)} (full), got {k}")
    _check_extent(params.spec, image)
    return _run_network(params, image, cut=k)


def tail_layers(spec: ModelSpec, k: int) -> list:
    """LayerSpec sequence of the trainable tail for cut k (1, 2 or 3)."""
    c = spec.head_in_channels
    head = LayerSpec("softmax", "head", in_channels=c)
    if k == 1:
        return [head]
    gn = LayerSpec("group-norm", "dec0.gn", in_channels=c, out_channels=c, groups=spec.groups)
    conv2 = LayerSpec("conv3x3", "dec0.conv2", in_channels=c, out_channels=c)
    rl = LayerSpec("relu", "dec0.relu")
    if k == 2:
        return [conv2, gn, rl, head]
    if k == 3:
        conv1 = LayerSpec("conv3x3", "dec0.conv1", in_channels=c, out_channels=c)
        return [conv1, rl, conv2, gn, rl, head]
    raise ConfigurationError(f"tail cut must be 1, 2 or 3, got {k}")


def tail_apply(params: ModelParams, k: int, features, masks=None):
    """Probabilities from tail-cut features; inverse of extract_features."""
    if k == total_conv_layers(params.spec):
        return forward(params.with_masks(masks) if masks is not None else params, features)
    merged = masks if masks is not None else params.masks
    return nn.tail_forward(tail_layers(params.spec, k), params.tensors, features,
                           masks=merged)


def tail_shrink(k: int) -> int:
    """Extent lost inside the tail (two pixels per 3x3 conv)."""
    return {1: 0, 2: 2, 3: 4}[k]


def tail_param_layer_names(k: int) -> set:
    return {1: {"head"}, 2: {"dec0.conv2", "dec0.gn", "head"},
            3: {"dec0.conv1", "dec0.conv2", "dec0.gn", "head"}}[k]


def trunk_fingerprint(params: ModelParams, k: int) -> int:
    """Checksum of everything that feeds the tail-cut features.

    Excludes the tail's own parameters (and masks on tail convs), so tail
    retrains and head growth do not invalidate cached features.
    """
    tail = tail_param_layer_names(k)
    crc = zlib.crc32(str(k).encode())
    for name in sorted(params.tensors):
        if name.rsplit(".", 1)[0] in tail:
            continue
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(params.tensors[name]).tobytes(), crc)
    if params.masks:
        for name in sorted(params.masks):
            if name in tail:
                continue
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(params.masks[name]).tobytes(), crc)
    return crc


def trainable_names(spec: ModelSpec, method: str, k: int = 1) -> list:
    """Parameter names a fine-tuning method may change."""
    if method == "last-k":
        convs = conv_layer_names(spec)[-k:]
        names = []
        for c in convs:
            names += [c + ".weight", c + ".bias"]
        return names
    if method == "group-params":
        return ["dec0.gn.gamma", "dec0.gn.beta"]
    raise ConfigurationError(f"unknown method '{method}'")


# ---------------------------------------------------------------------------
# training


def _backward_network(params: ModelParams, tape, dlogits):
    """Walk the forward tape in reverse; returns gradient dict for all params."""
    t = params.tensors
    grads = {}
    skip_grads = {}
    dy = None
    for entry in reversed(tape):
        kind = entry[0]
        if kind == "head":
            x_in = entry[1]
            w = t["head.weight"]
            grads["head.weight"] = np.einsum("nkhw,nchw->kc", dlogits, x_in)
            grads["head.bias"] = dlogits.sum(axis=(0, 2, 3))
            dy = np.einsum("nkhw,kc->nchw", dlogits, w)
        elif kind == "relu":
            dy = nn.relu_backward(entry[1], dy)
        elif kind == "gn":
            name, cache = entry[1], entry[2]
            dy, dg, db = nn.group_norm_backward(cache, t[name + ".gamma"], dy)
            grads[name + ".gamma"] = dg
            grads[name + ".beta"] = db
        elif kind == "conv":
            name, x_in = entry[1], entry[2]
            if params.masks and name in params.masks:
                m = params.masks[name].astype(dy.dtype)
                dy = dy * m[None, :, None, None]
            dy, dw, db = nn.conv2d_backward(x_in, t[name + ".weight"], dy)
            grads[name + ".weight"] = dw
            grads[name + ".bias"] = db
        elif kind == "deconv":
            name, x_in = entry[1], entry[2]
            dy, dw, db = nn.deconv2x2_backward(x_in, t[name + ".weight"], dy)
            grads[name + ".weight"] = dw
            grads[name + ".bias"] = db
        elif kind == "concat":
            _, d, skip_shape, th, tl, n_skip = entry
            dskip = np.zeros(skip_shape, dtype=dy.dtype)
            h, w = dy.shape[-2], dy.shape[-1]
            dskip[..., th:th + h, tl:tl + w] = dy[:, :n_skip]
            skip_grads[d] = dskip
            dy = np.ascontiguousarray(dy[:, n_skip:])
        elif kind == "pool":
            dy = nn.maxpool2x2_backward(entry[1], dy)
        elif kind == "skip-save":
            dy = dy + skip_grads.pop(entry[1])
    return grads


def _dense_loss_and_grad(probs, label_rasters):
    """Mean CE over every output pixel of the batch, plus dlogits."""
    n_cls = probs.shape[1]
    count = label_rasters.size
    onehot = np.eye(n_cls, dtype=probs.dtype)[label_rasters].transpose(0, 3, 1, 2)
    p_true = np.take_along_axis(probs, label_rasters[:, None], axis=1)
    loss = float(-np.log(np.maximum(p_true, 1e-30)).sum(dtype=np.float64) / count)
    dlogits = (probs - onehot) / count
    return loss, dlogits


def train_base(spec: ModelSpec, scenes: Sequence, epochs: int, seed: int,
               lr: float = 1e-3, lr_final: float = 1e-4,
               lr_decay_fraction: float = 0.6, batch_size: int = 8) -> ModelParams:
    """Train a base model on densely labeled patches.

    scenes: sequence of (image [c,H,W] float32, labels [H,W] int) pairs, all
    the same supported extent. Deterministic for a fixed seed: the same seed
    yields a bit-identical checkpoint. The learning rate steps down to
    lr_final after lr_decay_fraction of the epochs.
    """
    if len(scenes) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    ss = np.random.SeedSequence(seed).spawn(2)
    params = init_params(spec, seed)
    rng = np.random.Generator(np.random.PCG64(ss[1]))
    off = input_output_offset(spec)
    images = np.stack([np.asarray(img, dtype=np.float32) for img, _ in scenes])
    oh = output_extent(spec, images.shape[-2])
    ow = output_extent(spec, images.shape[-1])
    labels = np.stack([np.asarray(lab)[off:off + oh, off:off + ow] for _, lab in scenes])
    labels = labels.astype(np.int64)

    tensors = params.tensors
    state = nn.AdamState()
    decay_at = int(np.ceil(lr_decay_fraction * epochs))
    for epoch in range(epochs):
        cur_lr = lr if epoch < decay_at else lr_final
        order = rng.permutation(len(scenes))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            tape = []
            batch_params = ModelParams(spec=spec, tensors=tensors)
            probs = _run_network(batch_params, images[idx], tape=tape)
            _, dlogits = _dense_loss_and_grad(probs, labels[idx])
            grads = _backward_network(batch_params, tape, dlogits)
            tensors, state = nn.adam_step(tensors, grads, state, cur_lr)
    return ModelParams(spec=spec, tensors=tensors)


def monitoring_loss(params: ModelParams, scenes: Sequence, limit: int = 8) -> float:
    """Dense CE of the first ``limit`` scenes; used to watch training progress."""
    off = input_output_offset(params.spec)
    total, count = 0.0, 0
    for img, lab in scenes[:limit]:
        probs = forward(params, np.asarray(img, dtype=np.float32))
        oh, ow = probs.shape[-2:]
        y = np.asarray(lab)[off:off + oh, off:off + ow].astype(np.int64)
        p_true = np.take_along_axis(probs, y[None], axis=0)
        total += float(-np.log(np.maximum(p_true, 1e-30)).sum(dtype=np.float64))
        count += y.size
    return total / count


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# Layout (little-endian): magic "GLCK", u16 version, u32 header length,
# UTF-8 key=value header lines, u32 tensor count, then per tensor a
# length-prefixed name, dtype code, rank and dims, raw payload; the file ends
# with a CRC32 of everything before it.


@dataclass
class Checkpoint:
    params: ModelParams
    palette: list = field(default_factory=list)  # (name, "#rrggbb") pairs
    provenance: dict = field(default_factory=dict)


def default_palette(n: int) -> list:
    base = [("water", "#2f6fd0"), ("tree-canopy", "#1d6b33"),
            ("low-vegetation", "#8fd06a"), ("impervious", "#8a8a8a")]
    pal = base[:n]
    for i in range(len(pal), n):
        pal.append((f"class{i}", "#d05fb8"))
    return pal


def checkpoint_bytes(params: ModelParams, palette=None, provenance=None) -> bytes:
    if palette is None:
        palette = default_palette(params.n_classes)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    header = dict(params.spec.to_header())
    header["n_classes"] = str(params.n_classes)
    for i, (name, color) in enumerate(palette):
        header[f"palette.{i}.name"] = name
        header[f"palette.{i}.color"] = color
    for key, val in (provenance or {}).items():
        header[f"provenance.{key}"] = str(val)
    htext = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    buf.write(struct.pack("<I", len(htext)))
    buf.write(htext)

    entries = list(params.tensors.items())
    if params.masks:
        entries += [("mask:" + name, m.astype(np.uint8)) for name, m in params.masks.items()]
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        arr = np.ascontiguousarray(arr)
        buf.write(struct.pack("<BB", _DTYPE_IDS[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return payload + struct.pack("<I", crc)


def save_checkpoint(params: ModelParams, path, palette=None, provenance=None):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params, palette=palette, provenance=provenance))


def load_checkpoint_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic at byte 0")
    if len(raw) < 14:
        raise ChecksumError("file truncated")
    body, tail = raw[:-4], raw[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", tail)[0]:
        raise ChecksumError("checkpoint CRC mismatch (corrupt or truncated file)")
    version = struct.unpack_from("<H", body, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos = 6
    (hlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    header = {}
    for line in body[pos:pos + hlen].decode("utf-8").splitlines():
        key, _, val = line.partition("=")
        header[key] = val
    pos += hlen
    spec = ModelSpec.from_header(header)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors, masks = {}, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dcode, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dtype = _DTYPE_CODES[dcode]
            nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
            arr = np.frombuffer(body[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
            pos += nbytes
            if name.startswith("mask:"):
                masks[name[5:]] = arr
            else:
                tensors[name] = arr
    except (struct.error, ValueError) as exc:
        raise FormatError(f"malformed tensor record near byte {pos}") from exc
    palette = []
    i = 0
    while f"palette.{i}.name" in header:
        palette.append((header[f"palette.{i}.name"], header[f"palette.{i}.color"]))
        i += 1
    provenance = {k[len("provenance."):]: v for k, v in header.items()
                  if k.startswith("provenance.")}
    params = ModelParams(spec=spec, tensors=tensors, masks=masks or None)
    return Checkpoint(params=params, palette=palette, provenance=provenance)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return load_checkpoint_bytes(f.read())
