"""Server-side session state for the interactive correction loop.

A session pins one scene, one fine-tune method, and an immutable parameter
snapshot that readers use lock-free. Retraining builds the next snapshot off
to the side and publishes it with a single reference swap, so a prediction
served mid-retrain is entirely old or entirely new, never a blend; each
snapshot embeds a checksum that is re-verified on every read. One retrain
may be in flight per session; a second request is refused rather than
queued. Labels are append-only between resets; relabeling a coordinate
replaces its class (latest wins).
"""

import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import model as mdl
from .errors import (
    CoordinateError,
    EmptyLabelsError,
    ExtentError,
    PaletteError,
    RetrainBusyError,
    SceneNotFoundError,
    SessionNotFoundError,
)
from .finetune import FeatureCache, FineTuneConfig, build_feature_cache, run_finetune
from .metrics import EvalReport, evaluate, label_distribution
from .points import LabelPoint
from .synthdata import Scene, sample_label_points

EVAL_POINTS_PER_SCENE = 1000
MAX_PATCH = 512
DEFAULT_PATCH = 200

NEW_CLASS_BIAS_MARGIN = 10.0


@dataclass(frozen=True)
class Snapshot:
    """Immutable published model state."""

    params: mdl.ModelParams
    checksum: int
    retrain_index: int

    def verify(self):
        if self.params.fingerprint() != self.checksum:
            raise RuntimeError("snapshot checksum mismatch: torn parameter read")


@dataclass
class MetricsEntry:
    retrain_index: int
    timestamp: float
    report: EvalReport
    label_count: int = 0


@dataclass
class SceneEntry:
    scene_id: str
    scene: Scene
    eval_points: list  # held out from the labeler role


class Registry:
    """Scenes plus the shared base checkpoint the sessions start from."""

    def __init__(self, base: mdl.ModelParams, palette: Optional[list] = None):
        self.base = base
        self.palette = list(palette) if palette else mdl.default_palette(base.n_classes)
        self.scenes: dict = {}
        self._baseline_cache: dict = {}
        self._lock = threading.Lock()

    def add_scene(self, scene_id: str, scene: Scene, eval_seed: int = 0):
        off = mdl.input_output_offset(self.base.spec)
        points = sample_label_points(scene, EVAL_POINTS_PER_SCENE, seed=eval_seed,
                                     margin=off)
        self.scenes[scene_id] = SceneEntry(scene_id=scene_id, scene=scene,
                                           eval_points=points)

    def get_scene(self, scene_id: str) -> SceneEntry:
        entry = self.scenes.get(scene_id)
        if entry is None:
            raise SceneNotFoundError(f"unknown scene '{scene_id}'")
        return entry

    def baseline_report(self, scene_id: str) -> EvalReport:
        key = (scene_id, self.base.fingerprint())
        with self._lock:
            cached = self._baseline_cache.get(key)
        if cached is not None:
            return cached
        entry = self.get_scene(scene_id)
        report = evaluate_on_points(self.base, entry.scene, entry.eval_points)
        with self._lock:
            self._baseline_cache[key] = report
        return report


def evaluate_on_points(params: mdl.ModelParams, scene: Scene,
                       points: Sequence[LabelPoint],
                       dist: Optional[dict] = None) -> EvalReport:
    """Score a parameter set on held-out ground-truth points."""
    off = mdl.input_output_offset(params.spec)
    probs = mdl.forward(params, scene.image)
    shifted = [LabelPoint(p.row - off, p.col - off, p.cls) for p in points]
    return evaluate(probs, shifted, n_classes=params.n_classes, label_distribution=dist)


def grow_head(params: mdl.ModelParams) -> mdl.ModelParams:
    """Add one output class whose logit can never win until it is trained.

    The new row is zero weights with a bias sunk well below the smallest
    existing bias, so pre-training argmax predictions are unchanged.
    """
    w = params.tensors["head.weight"]
    b = params.tensors["head.bias"]
    new_w = np.vstack([w, np.zeros((1, w.shape[1]), dtype=w.dtype)])
    new_b = np.concatenate([b, [b.min() - NEW_CLASS_BIAS_MARGIN]]).astype(b.dtype)
    return params.with_tensors({"head.weight": new_w, "head.bias": new_b})


class Session:
    def __init__(self, session_id: str, entry: SceneEntry, registry: Registry,
                 config: FineTuneConfig, retrain_delay_s: float = 0.0):
        self.session_id = session_id
        self.entry = entry
        self.registry = registry
        self.config = config
        self.retrain_delay_s = retrain_delay_s
        self.created_at = time.time()
        self._state_lock = threading.Lock()  # labels / palette / history writes
        self._retrain_lock = threading.Lock()  # single retrain in flight
        self._reset_state()

    def _reset_state(self):
        self.base = self.registry.base  # grows with added classes
        self.palette = list(self.registry.palette)
        self.labels: dict = {}  # (row, col) -> (cls, timestamp)
        self.cache: Optional[FeatureCache] = None
        self.snapshot = Snapshot(params=self.registry.base,
                                 checksum=self.registry.base.fingerprint(),
                                 retrain_index=0)
        baseline = self.registry.baseline_report(self.entry.scene_id)
        self.metrics_history = [MetricsEntry(0, time.time(), baseline, label_count=0)]

    # -- reads ------------------------------------------------------------

    def current_snapshot(self) -> Snapshot:
        snap = self.snapshot  # single reference read: atomic
        snap.verify()
        return snap

    def predict_patch(self, center_row: int, center_col: int,
                      patch_size: int = DEFAULT_PATCH):
        """Class/confidence overlay around a point, from the live snapshot.

        Returns (classes [h,w], max_prob [h,w], extent dict). The patch is
        clamped into the scene and snapped to a supported extent.
        """
        snap = self.current_snapshot()
        scene = self.entry.scene
        spec = snap.params.spec
        if patch_size > MAX_PATCH:
            patch_size = MAX_PATCH
        size = mdl.snap_extent(spec, min(patch_size, scene.height, scene.width), "down")
        if size < mdl.min_input_extent(spec):
            raise ExtentError(f"scene smaller than the minimum viable input "
                              f"{mdl.min_input_extent(spec)}",
                              min_extent=mdl.min_input_extent(spec))
        top = min(max(int(center_row) - size // 2, 0), scene.height - size)
        left = min(max(int(center_col) - size // 2, 0), scene.width - size)
        crop = scene.image[:, top:top + size, left:left + size]
        probs = mdl.forward(snap.params, crop)
        off = mdl.input_output_offset(spec)
        classes = probs.argmax(axis=0).astype(np.uint8)
        max_prob = probs.max(axis=0)
        extent = {
            "row0": top + off,
            "col0": left + off,
            "height": classes.shape[0],
            "width": classes.shape[1],
            "offset": off,
            "snapshot_checksum": snap.checksum,
            "retrain_index": snap.retrain_index,
        }
        return classes, max_prob, extent

    def get_metrics(self):
        with self._state_lock:
            history = list(self.metrics_history)
            dist = label_distribution(self._label_points(), len(self.palette)) \
                if self.labels else None
        return history, dist

    def _label_points(self):
        return [LabelPoint(r, c, cls) for (r, c), (cls, _) in self.labels.items()]

    # -- writes -----------------------------------------------------------

    def submit_labels(self, points: Sequence):
        """Append labels; relabeling a coordinate keeps the newest class."""
        scene = self.entry.scene
        accepted = 0
        updated = 0
        with self._state_lock:
            n_palette = len(self.palette)
            for row, col, cls in points:
                if not (0 <= row < scene.height and 0 <= col < scene.width):
                    raise CoordinateError(
                        f"label ({row}, {col}) outside scene {scene.height}x{scene.width}")
                if not (0 <= cls < n_palette):
                    raise PaletteError(
                        f"class {cls} not in palette; valid classes are "
                        + ", ".join(f"{i}={name}" for i, (name, _) in enumerate(self.palette)))
                key = (int(row), int(col))
                if key in self.labels:
                    updated += 1
                else:
                    accepted += 1
                self.labels[key] = (int(cls), time.time())
        return accepted, updated

    def retrain(self):
        """Fit the session's method on all labels and publish a new snapshot."""
        if not self._retrain_lock.acquire(blocking=False):
            raise RetrainBusyError("a retrain is already in flight for this session")
        try:
            with self._state_lock:
                points = self._label_points()
                base = self.base
            if not points:
                raise EmptyLabelsError("no labels submitted yet")
            if self.cache is None or self.cache.trunk_fingerprint != \
                    mdl.trunk_fingerprint(base, self.config.tail_cut()):
                self.cache = None
            self.cache = build_feature_cache(base, self.entry.scene.image, points,
                                             self.config.tail_cut(), cache=self.cache)
            params = run_finetune(base, self.entry.scene.image, points, self.config,
                                  cache=self.cache)
            if self.retrain_delay_s:
                time.sleep(self.retrain_delay_s)
            dist = label_distribution(points, len(self.palette))
            report = evaluate_on_points(params, self.entry.scene,
                                        self.entry.eval_points, dist=dist)
            with self._state_lock:
                index = self.snapshot.retrain_index + 1
                self.snapshot = Snapshot(params=params, checksum=params.fingerprint(),
                                         retrain_index=index)
                entry = MetricsEntry(index, time.time(), report, label_count=len(points))
                self.metrics_history.append(entry)
            return index, report
        finally:
            self._retrain_lock.release()

    def add_class(self, name: str, color: str) -> int:
        with self._state_lock:
            if any(existing == name for existing, _ in self.palette):
                raise PaletteError(f"class '{name}' already in palette")
            self.palette.append((name, color))
            self.base = grow_head(self.base)
            grown = grow_head(self.snapshot.params) \
                if self.snapshot.params.n_classes < len(self.palette) else self.snapshot.params
            self.snapshot = Snapshot(params=grown, checksum=grown.fingerprint(),
                                     retrain_index=self.snapshot.retrain_index)
            return len(self.palette) - 1

    def reset(self):
        """Back to the pretrained baseline: labels, palette and history restart."""
        with self._state_lock:
            self._reset_state()

    def export_checkpoint(self) -> bytes:
        snap = self.current_snapshot()
        with self._state_lock:
            palette = list(self.palette)
        return mdl.checkpoint_bytes(snap.params, palette=palette,
                                    provenance={"session": self.session_id,
                                                "scene": self.entry.scene_id,
                                                "retrains": snap.retrain_index,
                                                "method": self.config.method})


class SessionStore:
    def __init__(self, registry: Registry, retrain_delay_s: float = 0.0):
        self.registry = registry
        self.retrain_delay_s = retrain_delay_s
        self._sessions: dict = {}
        self._lock = threading.Lock()

    def create(self, scene_id: str, config: FineTuneConfig) -> Session:
        entry = self.registry.get_scene(scene_id)
        config.validate()
        session = Session(session_id=uuid.uuid4().hex, entry=entry,
                          registry=self.registry, config=config,
                          retrain_delay_s=self.retrain_delay_s)
        with self._lock:
            self._sessions[session.session_id] = session
        return session

    def get(self, session_id: str) -> Session:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise SessionNotFoundError(f"unknown session '{session_id}'")
        return session
