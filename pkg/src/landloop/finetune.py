"""Fast fine-tuning of the frozen-trunk model on accumulated point labels.

Three method families, all touching only the network tail:

* last-k: gradient descent on the weights of the final k conv-type layers
  (k=1 is just the softmax classifier, a convex problem on fixed features);
* group-params: gradient descent on the gamma/beta of the tail's group norm
  while every conv weight stays frozen;
* dropout-ga: a genetic search over per-channel binary masks applied to the
  tail's feature convolutions, scored by label-set loss.

Each label is backed by a cached feature patch extracted once from the
frozen trunk, so repeated retrains never re-execute the trunk; that is what
makes retraining interactive.
"""

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import model as mdl
from . import nn
from .errors import ConfigurationError, CoordinateError, EmptyLabelsError, StaleCacheError
from .points import LabelPoint

# Appendix-style defaults: learning rate per method.
DEFAULT_LEARNING_RATES = {
    "last-1": 0.01,
    "last-2": 0.005,
    "last-3": 0.001,
    "group-params": 0.0025,
}
ADAM_EPS = 1e-5

FINETUNE_METHODS = ("last-1", "last-2", "last-3", "group-params", "dropout-ga")


@dataclass(frozen=True)
class GAConfig:
    """Settings of the binary-mask genetic search."""

    masked_layers: int = 2  # tail feature convs to mask, deepest first
    mean_dropout: float = 0.2
    generations: int = 64
    population: int = 32
    elite: int = 4
    mutation_prob: float = 0.05
    seed: int = 0

    def validate(self):
        if not (0.0 < self.mean_dropout < 1.0):
            raise ConfigurationError("mean dropout rate must be in (0, 1)")
        if self.generations < 1:
            raise ConfigurationError("need at least one generation")
        if self.population < 2:
            raise ConfigurationError("population must be at least 2")
        if self.elite < 1 or self.elite > self.population:
            raise ConfigurationError("elite count must be in [1, population]")


@dataclass(frozen=True)
class FineTuneConfig:
    method: str = "last-1"
    learning_rate: Optional[float] = None  # None = method default
    epochs: int = 10
    to_convergence: bool = False
    convergence_tol: float = 1e-4
    max_epochs: int = 500
    reinit_from_base: bool = True
    ga: GAConfig = field(default_factory=GAConfig)

    def validate(self):
        if self.method not in FINETUNE_METHODS:
            raise ConfigurationError(
                f"unknown method '{self.method}', expected one of {FINETUNE_METHODS}")
        if self.resolved_lr() <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.method == "dropout-ga":
            self.ga.validate()

    def resolved_lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return DEFAULT_LEARNING_RATES.get(self.method, 0.01)

    def tail_cut(self) -> int:
        if self.method.startswith("last-"):
            return int(self.method.split("-")[1])
        if self.method == "group-params":
            return 2  # tail must contain the group norm
        return 3  # dropout-ga masks both feature convs of the top block


# ---------------------------------------------------------------------------
# feature cache


@dataclass
class FeatureCache:
    """Per-label tail-input feature patches under a fixed trunk.

    Valid only while the trunk fingerprint matches; ``trunk_executions``
    counts how many label patches ever went through the trunk (used to
    assert incrementality).
    """

    cut: int
    context: int
    trunk_fingerprint: int
    features: dict = field(default_factory=dict)  # (row, col) -> [C, t+1, t+1]
    trunk_executions: int = 0

    def gather(self, labels: Sequence[LabelPoint]):
        feats = np.stack([self.features[(p.row, p.col)] for p in labels])
        classes = np.array([p.cls for p in labels], dtype=np.int64)
        return feats, classes


def check_labels_in_extent(spec, image_shape, labels):
    off = mdl.input_output_offset(spec)
    h, w = image_shape[-2], image_shape[-1]
    for p in labels:
        if not (off <= p.row < h - off and off <= p.col < w - off):
            raise CoordinateError(
                f"label at ({p.row}, {p.col}) outside the predictable extent "
                f"[{off}, {h - off}) x [{off}, {w - off})")


def build_feature_cache(base: mdl.ModelParams, image, labels: Sequence[LabelPoint],
                        cut: int, context: Optional[int] = None,
                        cache: Optional[FeatureCache] = None) -> FeatureCache:
    """Compute tail-input patches for any labels not already cached.

    Each new label costs exactly one trunk execution over its context patch;
    known labels are free. Passing a cache built under a different trunk is
    an error rather than a silent recompute.
    """
    spec = base.spec
    if context is None:
        context = mdl.min_input_extent(spec)
    fp = mdl.trunk_fingerprint(base, cut)
    if cache is None:
        cache = FeatureCache(cut=cut, context=context, trunk_fingerprint=fp)
    else:
        if cache.trunk_fingerprint != fp or cache.cut != cut or cache.context != context:
            raise StaleCacheError(
                "feature cache was built under a different trunk or tail cut")
    check_labels_in_extent(spec, image.shape, labels)
    missing = [p for p in labels if (p.row, p.col) not in cache.features]
    if not missing:
        return cache
    off = mdl.input_output_offset(spec)
    t = mdl.tail_shrink(cut)
    out_ctx = mdl.output_extent(spec, context)
    h, w = image.shape[-2], image.shape[-1]
    patches = np.empty((len(missing), spec.channels, context, context), dtype=np.float32)
    anchors = []
    for i, p in enumerate(missing):
        pr = min(max(p.row - context // 2, 0), h - context)
        pc = min(max(p.col - context // 2, 0), w - context)
        patches[i] = image[:, pr:pr + context, pc:pc + context]
        anchors.append((p.row - pr - off, p.col - pc - off))
    feats = mdl._run_network(base, patches, cut=cut)
    for i, p in enumerate(missing):
        orow, ocol = anchors[i]
        assert 0 <= orow < out_ctx and 0 <= ocol < out_ctx
        cache.features[(p.row, p.col)] = np.ascontiguousarray(
            feats[i, :, orow:orow + t + 1, ocol:ocol + t + 1])
    cache.trunk_executions += len(missing)
    return cache


# ---------------------------------------------------------------------------
# gradient-based methods


def _train_tail(base, layers, trainable, feats, classes, config, masks=None,
                start_tensors=None):
    """Full-batch Adam on the selected tail parameters over cached features.

    Returns (tensors, pre_loss, post_loss, epochs_run). If the run ends worse
    than it started, the starting tensors are returned instead.
    """
    tensors = dict(start_tensors if start_tensors is not None else base.tensors)
    start = dict(tensors)
    state = nn.AdamState()
    lr = config.resolved_lr()
    limit = config.max_epochs if config.to_convergence else config.epochs
    pre_loss = None
    prev_loss = None
    epochs_run = 0
    for _ in range(limit):
        loss, grads = nn.backward_tail_batch(layers, tensors, feats, classes,
                                             trainable, masks=masks)
        if pre_loss is None:
            pre_loss = loss
        tensors, state = nn.adam_step(tensors, grads, state, lr, eps=ADAM_EPS)
        epochs_run += 1
        if config.to_convergence and prev_loss is not None:
            if abs(prev_loss - loss) / max(abs(prev_loss), 1e-12) < config.convergence_tol:
                break
        prev_loss = loss
    probs = nn.tail_forward(layers, tensors, feats, masks=masks)
    post_loss = nn.batch_ce_loss(probs, classes)
    if pre_loss is None:  # zero-epoch run
        pre_loss = post_loss
    if post_loss > pre_loss:
        return start, pre_loss, pre_loss, epochs_run
    return tensors, pre_loss, post_loss, epochs_run


def _prepare(base, image, labels, config, cache, cut):
    config.validate()
    labels = list(labels)
    if not labels:
        raise EmptyLabelsError("fine-tuning needs at least one label")
    cache = build_feature_cache(base, image, labels, cut,
                                context=cache.context if cache else None, cache=cache)
    feats, classes = cache.gather(labels)
    return labels, cache, feats, classes


def finetune_last_k(base: mdl.ModelParams, k: int, image, labels, config: FineTuneConfig,
                    cache: Optional[FeatureCache] = None,
                    start: Optional[mdl.ModelParams] = None) -> mdl.ModelParams:
    """Retrain the last k conv-type layers (k in 1..3) on the label set.

    The tail restarts from the base weights unless ``start`` carries a warm
    state and the config disables re-initialization.
    """
    if k not in (1, 2, 3):
        raise ConfigurationError(f"k must be 1, 2 or 3, got {k}")
    labels, cache, feats, classes = _prepare(base, image, labels, config, cache, k)
    layers = mdl.tail_layers(base.spec, k)
    trainable = mdl.trainable_names(base.spec, "last-k", k)
    start_tensors = None
    if not config.reinit_from_base and start is not None:
        start_tensors = start.tensors
    tensors, _, _, _ = _train_tail(base, layers, trainable, feats, classes, config,
                                   masks=base.masks, start_tensors=start_tensors)
    return base.with_tensors({n: tensors[n] for n in trainable})


def finetune_group_params(base: mdl.ModelParams, image, labels, config: FineTuneConfig,
                          cache: Optional[FeatureCache] = None,
                          start: Optional[mdl.ModelParams] = None) -> mdl.ModelParams:
    """Retrain only the tail group-norm gamma/beta; conv weights stay frozen."""
    cut = config.tail_cut()
    labels, cache, feats, classes = _prepare(base, image, labels, config, cache, cut)
    layers = mdl.tail_layers(base.spec, cut)
    trainable = mdl.trainable_names(base.spec, "group-params")
    start_tensors = None
    if not config.reinit_from_base and start is not None:
        start_tensors = start.tensors
    tensors, _, _, _ = _train_tail(base, layers, trainable, feats, classes, config,
                                   masks=base.masks, start_tensors=start_tensors)
    return base.with_tensors({n: tensors[n] for n in trainable})


# ---------------------------------------------------------------------------
# dropout mask search


@dataclass
class DropoutSearchResult:
    params: mdl.ModelParams
    best_losses: list  # best-so-far loss after each generation
    masks: dict


def _maskable_layers(spec, count):
    layers = ["dec0.conv2", "dec0.conv1"]  # deepest-in-tail first
    if count > len(layers):
        raise ConfigurationError(
            f"can mask at most {len(layers)} tail layers, asked for {count}")
    return layers[:count]


def finetune_dropout_ga(base: mdl.ModelParams, image, labels, ga: GAConfig,
                        cache: Optional[FeatureCache] = None) -> DropoutSearchResult:
    """Search per-channel binary masks over the tail's feature convolutions.

    A mutation-only GA with elitism and binary tournaments; the identity mask
    is seeded into generation 0, so the winner can never score worse than the
    unmasked model on the label set. Returns the lowest-loss individual ever
    evaluated.
    """
    ga.validate()
    labels = list(labels)
    if not labels:
        raise EmptyLabelsError("fine-tuning needs at least one label")
    cut = 3
    cache = build_feature_cache(base, image, labels, cut,
                                context=cache.context if cache else None, cache=cache)
    feats, classes = cache.gather(labels)
    layers = mdl.tail_layers(base.spec, cut)
    names = _maskable_layers(base.spec, ga.masked_layers)
    widths = [base.tensors[n + ".weight"].shape[0] for n in names]
    genome_len = sum(widths)

    def to_masks(bits):
        masks = {}
        pos = 0
        for name, width in zip(names, widths):
            masks[name] = bits[pos:pos + width].astype(np.uint8)
            pos += width
        return masks

    def fitness(bits):
        probs = nn.tail_forward(layers, base.tensors, feats, masks=to_masks(bits))
        return nn.batch_ce_loss(probs, classes)

    rng = np.random.Generator(np.random.PCG64(ga.seed))
    pop = (rng.random((ga.population, genome_len)) >= ga.mean_dropout).astype(np.uint8)
    pop[0, :] = 1  # identity mask
    scores = np.array([fitness(ind) for ind in pop])
    best_idx = int(scores.argmin())
    best_bits, best_loss = pop[best_idx].copy(), float(scores[best_idx])
    trace = []
    for _ in range(ga.generations):
        order = np.argsort(scores, kind="stable")
        new_pop = [pop[i].copy() for i in order[:ga.elite]]
        while len(new_pop) < ga.population:
            a, b = rng.integers(0, ga.population, size=2)
            parent = pop[a] if scores[a] <= scores[b] else pop[b]
            child = parent.copy()
            flip = rng.random(genome_len) < ga.mutation_prob
            child[flip] ^= 1
            new_pop.append(child)
        pop = np.stack(new_pop)
        scores = np.array([fitness(ind) for ind in pop])
        gen_idx = int(scores.argmin())
        if scores[gen_idx] < best_loss:
            best_loss = float(scores[gen_idx])
            best_bits = pop[gen_idx].copy()
        trace.append(best_loss)
    masks = to_masks(best_bits)
    return DropoutSearchResult(params=base.with_masks(masks), best_losses=trace,
                               masks=masks)


# ---------------------------------------------------------------------------
# dispatch


def run_finetune(base: mdl.ModelParams, image, labels, config: FineTuneConfig,
                 cache: Optional[FeatureCache] = None,
                 start: Optional[mdl.ModelParams] = None) -> mdl.ModelParams:
    """Run the configured method; returns the new parameter set."""
    if config.method.startswith("last-"):
        return finetune_last_k(base, config.tail_cut(), image, labels, config,
                               cache=cache, start=start)
    if config.method == "group-params":
        return finetune_group_params(base, image, labels, config, cache=cache, start=start)
    if config.method == "dropout-ga":
        return finetune_dropout_ga(base, image, labels, config.ga, cache=cache).params
    raise ConfigurationError(f"unknown method '{config.method}'")
