"""Point-selection strategies and the batched label-acquisition schedule.

Four ways to pick which pixels to request labels for: uniform random,
highest predictive entropy, smallest top-two probability margin, and a mock
teacher that samples from the model's current mistakes (it peeks at ground
truth, so it is a comparison point, not a deployable strategy). The
uncertainty methods rank a large uniformly drawn candidate pool rather than
every pixel, and selection happens in batches at fixed cumulative label
counts, mirroring how the offline benchmark is run.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import model as mdl
from .errors import ConfigurationError, EmptyLabelsError
from .finetune import FineTuneConfig, build_feature_cache, run_finetune
from .metrics import EvalReport, evaluate, label_distribution
from .points import LabelPoint

QUERY_KINDS = ("random", "entropy", "min-margin", "mistakes")

DEFAULT_SCHEDULE = (10, 40, 100, 200, 400, 1000, 2000)


@dataclass(frozen=True)
class QueryMethod:
    kind: str = "random"
    pool_size: int = 10000
    seed: int = 0

    def validate(self):
        if self.kind not in QUERY_KINDS:
            raise ConfigurationError(
                f"unknown query kind '{self.kind}', expected one of {QUERY_KINDS}")
        if self.pool_size < 1:
            raise ConfigurationError("candidate pool must be positive")


@dataclass(frozen=True)
class QuerySchedule:
    checkpoints: tuple = DEFAULT_SCHEDULE

    def validate(self):
        prev = 0
        for c in self.checkpoints:
            if c <= prev:
                raise ConfigurationError(
                    "schedule checkpoints must be strictly increasing positive counts")
            prev = c


@dataclass
class SelectionResult:
    positions: list  # (row, col) scene coordinates
    fell_back_to_random: bool = False


@dataclass(frozen=True)
class ExtentWindow:
    """Scene-coordinate window the model can predict (inside the margin)."""

    row0: int
    col0: int
    height: int
    width: int

    @classmethod
    def for_scene(cls, spec, scene_shape):
        off = mdl.input_output_offset(spec)
        h, w = scene_shape[-2], scene_shape[-1]
        return cls(off, off, h - 2 * off, w - 2 * off)


def _entropy(p):
    p = p.astype(np.float64)
    logp = np.log(p, out=np.zeros_like(p), where=p > 0)
    return -(p * logp).sum(axis=0)


def _margin(p):
    top2 = np.sort(p.astype(np.float64), axis=0)[-2:]
    return top2[1] - top2[0]


def select_points(method: QueryMethod, probs, window: ExtentWindow,
                  ground_truth=None, count: int = 1,
                  already_selected: Sequence = ()) -> SelectionResult:
    """Pick ``count`` distinct unlabeled positions inside the window.

    probs: [n, window.height, window.width] model output over the window
    (required by entropy/min-margin); ground_truth: full-scene class raster
    (required by mistakes). Ties rank by (row, col).
    """
    method.validate()
    if count > method.pool_size:
        raise ConfigurationError(
            f"requested {count} points from a pool of {method.pool_size}")
    if method.kind != "random" and probs is None:
        raise ConfigurationError(f"{method.kind} needs model probabilities")
    if method.kind == "mistakes" and ground_truth is None:
        raise ConfigurationError("mistakes needs a ground-truth raster")

    rng = np.random.Generator(np.random.PCG64(method.seed))
    taken = np.zeros((window.height, window.width), dtype=bool)
    for r, c in already_selected:
        rr, cc = r - window.row0, c - window.col0
        if 0 <= rr < window.height and 0 <= cc < window.width:
            taken[rr, cc] = True
    avail = np.flatnonzero(~taken.reshape(-1))
    if avail.size < count:
        raise ConfigurationError(
            f"only {avail.size} unlabeled positions left, asked for {count}")

    def to_scene(flat):
        rows = flat // window.width + window.row0
        cols = flat % window.width + window.col0
        return [(int(r), int(c)) for r, c in zip(rows, cols)]

    if method.kind == "random":
        chosen = rng.choice(avail, size=count, replace=False)
        return SelectionResult(positions=to_scene(chosen))

    pool = (avail if avail.size <= method.pool_size
            else rng.choice(avail, size=method.pool_size, replace=False))
    rows = pool // window.width
    cols = pool % window.width

    if method.kind in ("entropy", "min-margin"):
        if method.kind == "entropy":
            score = -_entropy(probs)[rows, cols]  # ascending = highest entropy first
        else:
            score = _margin(probs)[rows, cols]  # ascending = tightest margin first
        order = np.lexsort((cols, rows, score))
        return SelectionResult(positions=to_scene(pool[order[:count]]))

    # mistakes: uniform over pool positions the model currently gets wrong
    pred = probs.argmax(axis=0)
    truth = ground_truth[rows + window.row0, cols + window.col0]
    wrong = pred[rows, cols] != truth
    wrong_pool = pool[wrong]
    fell_back = False
    if wrong_pool.size >= count:
        chosen = rng.choice(wrong_pool, size=count, replace=False)
    else:
        fell_back = True
        rest = pool[~wrong]
        extra = rng.choice(rest, size=count - wrong_pool.size, replace=False)
        chosen = np.concatenate([wrong_pool, extra])
    return SelectionResult(positions=to_scene(chosen), fell_back_to_random=fell_back)


@dataclass
class ScheduleStep:
    label_count: int
    params: mdl.ModelParams
    report: EvalReport


def run_schedule(scene, base: mdl.ModelParams, method: QueryMethod,
                 config: FineTuneConfig, schedule: QuerySchedule,
                 n_classes: Optional[int] = None) -> list:
    """Offline benchmark loop over one fully labeled area.

    At each cumulative checkpoint: select the next batch with the current
    model's predictions, read labels off the truth raster, re-fine-tune from
    the base on everything accumulated, and score on the whole predictable
    extent. Point sets nest across checkpoints.
    """
    schedule.validate()
    if scene.labels is None:
        raise EmptyLabelsError("offline schedule needs a ground-truth raster")
    if n_classes is None:
        n_classes = scene.n_classes
    spec = base.spec
    window = ExtentWindow.for_scene(spec, scene.image.shape)
    truth_window = scene.labels[window.row0:window.row0 + window.height,
                                window.col0:window.col0 + window.width]
    checkpoint_seeds = np.random.SeedSequence(method.seed).generate_state(
        len(schedule.checkpoints), dtype=np.uint64)

    probs = mdl.forward(base, scene.image)
    labels: list = []
    positions: list = []
    cache = None
    steps = []
    for i, target in enumerate(schedule.checkpoints):
        step_method = QueryMethod(kind=method.kind, pool_size=method.pool_size,
                                  seed=int(checkpoint_seeds[i]))
        sel = select_points(step_method, probs, window, ground_truth=scene.labels,
                            count=target - len(labels), already_selected=positions)
        for r, c in sel.positions:
            labels.append(LabelPoint(r, c, int(scene.labels[r, c])))
            positions.append((r, c))
        if cache is None:
            cache = build_feature_cache(base, scene.image, labels, config.tail_cut())
        params = run_finetune(base, scene.image, labels, config, cache=cache)
        probs = mdl.forward(params, scene.image)
        report = evaluate(probs, truth_window, n_classes=n_classes,
                          label_distribution=label_distribution(labels, n_classes))
        steps.append(ScheduleStep(label_count=len(labels), params=params, report=report))
    return steps
