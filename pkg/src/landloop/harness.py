"""Experiment runner: the offline benchmark grid and the simulated labeler.

Produces one CSV row per (area, fine-tune method, query method, seed,
checkpoint), a 400-point aggregate table with one cell per method pair, and
a time-budget simulation of a labeler who spends a fixed number of seconds
per random point while the model retrains on a fixed interval. All outputs
are reproducible from the manifest's seeds; grid cells may run in a worker
pool because rows are sorted before writing.
"""

import csv
import io
import os
from dataclasses import dataclass, replace
from multiprocessing import get_context
from typing import Optional, Sequence

import numpy as np

from . import model as mdl
from .errors import ConfigurationError, EmptyLabelsError
from .finetune import FineTuneConfig, GAConfig, build_feature_cache, run_finetune
from .metrics import EvalReport, evaluate, label_distribution
from .points import LabelPoint
from .query import ExtentWindow, QueryMethod, QuerySchedule, run_schedule
from .synthdata import DEFAULT_TARGET_DELTA, Scene, SceneConfig, generate_scene

CSV_HEADER = ["area", "finetune", "query", "seed", "label_count", "accuracy", "mean_iou"]


# ---------------------------------------------------------------------------
# synthetic datasets


def training_patches(count: int, extent: int, seed: int, shift_delta: float = 0.0):
    """Small densely labeled scenes for base training, one sub-seed each."""
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
    patches = []
    for s in seeds:
        scene = generate_scene(SceneConfig(width=extent, height=extent,
                                           seed=int(s), shift_delta=shift_delta,
                                           smooth_scale=6.0))
        patches.append((scene.image, scene.labels))
    return patches


def target_area(seed: int, size: int = 256,
                shift_delta: float = DEFAULT_TARGET_DELTA) -> Scene:
    """A shifted-domain evaluation area with ground truth."""
    return generate_scene(SceneConfig(width=size, height=size, seed=seed,
                                      shift_delta=shift_delta))


def train_desk_base(seed: int = 0, patches: int = 200, epochs: int = 20,
                    extent: int = 64) -> mdl.ModelParams:
    """The default desk-profile base model on source-domain patches."""
    spec = mdl.ModelSpec.desk()
    data = training_patches(patches, extent, seed)
    return mdl.train_base(spec, data, epochs=epochs, seed=seed)


# ---------------------------------------------------------------------------
# offline grid


def _finetune_config(method: str, ga_seed: int = 0) -> FineTuneConfig:
    if method == "dropout-ga":
        return FineTuneConfig(method=method, ga=GAConfig(seed=ga_seed))
    return FineTuneConfig(method=method)


def _grid_cell(args):
    area_name, scene, base, ft_method, query_kind, seed, checkpoints, pool_size = args
    config = _finetune_config(ft_method, ga_seed=seed)
    method = QueryMethod(kind=query_kind, pool_size=pool_size, seed=seed)
    steps = run_schedule(scene, base, method, config, QuerySchedule(checkpoints))
    rows = []
    for step in steps:
        rows.append([area_name, ft_method, query_kind, seed, step.label_count,
                     f"{step.report.pixel_accuracy:.6f}", f"{step.report.mean_iou:.6f}"])
    return rows


def run_offline_grid(areas: dict, base: mdl.ModelParams,
                     ft_methods: Sequence[str], query_methods: Sequence[str],
                     schedule: Sequence[int], seeds: Sequence[int],
                     pool_size: int = 10000, workers: Optional[int] = None):
    """Every (area, fine-tune, query, seed) cell over the schedule.

    Returns sorted rows (strings, CSV-ready). Cells are independent and
    deterministic, so the worker pool never changes the output bytes.
    """
    cells = []
    for area_name in sorted(areas):
        for ft in ft_methods:
            for q in query_methods:
                for seed in seeds:
                    cells.append((area_name, areas[area_name], base, ft, q,
                                  int(seed), tuple(schedule), pool_size))
    if workers is None:
        workers = min(os.cpu_count() or 1, len(cells))
    if workers > 1 and len(cells) > 1:
        with get_context("spawn").Pool(workers) as pool:
            chunks = pool.map(_grid_cell, cells)
    else:
        chunks = [_grid_cell(c) for c in cells]
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (r[0], r[1], r[2], int(r[3]), int(r[4])))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def aggregate_at_checkpoint(rows, label_count: int = 400):
    """Mean accuracy/IoU per (fine-tune, query) cell at one checkpoint."""
    cells = {}
    for area, ft, q, seed, count, acc, iou in rows:
        if int(count) == label_count:
            cells.setdefault((ft, q), []).append((float(acc), float(iou)))
    return {key: (float(np.mean([a for a, _ in vals])),
                  float(np.mean([i for _, i in vals])))
            for key, vals in sorted(cells.items())}


def format_aggregate_table(agg, label_count: int = 400) -> str:
    fts = sorted({ft for ft, _ in agg})
    qs = sorted({q for _, q in agg})
    lines = [f"mean accuracy / mean IoU at {label_count} labeled points"]
    header = ["query".ljust(12)] + [ft.ljust(22) for ft in fts]
    lines.append("  ".join(header))
    for q in qs:
        row = [q.ljust(12)]
        for ft in fts:
            acc, iou = agg.get((ft, q), (float("nan"), float("nan")))
            row.append(f"{acc:.3f} / {iou:.3f}".ljust(22))
        lines.append("  ".join(row))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# random-labeler time-budget simulation


@dataclass
class SimPoint:
    elapsed_seconds: int
    label_count: int
    report: EvalReport


def simulate_random_labeler(scene: Scene, base: mdl.ModelParams,
                            config: FineTuneConfig, seed: int = 0,
                            session_seconds: int = 900,
                            seconds_per_label: int = 3,
                            retrain_interval: int = 45) -> list:
    """A labeler who marks one uniform random point every few seconds.

    The model retrains on the accumulated points at every interval and is
    scored against the full predictable extent; the series starts with the
    untouched baseline at t=0.
    """
    if scene.labels is None:
        raise EmptyLabelsError("simulation needs a ground-truth raster")
    n_classes = scene.n_classes
    spec = base.spec
    window = ExtentWindow.for_scene(spec, scene.image.shape)
    truth_window = scene.labels[window.row0:window.row0 + window.height,
                                window.col0:window.col0 + window.width]

    def score(params, labels):
        probs = mdl.forward(params, scene.image)
        dist = label_distribution(labels, n_classes) if labels else None
        return evaluate(probs, truth_window, n_classes=n_classes,
                        label_distribution=dist)

    series = [SimPoint(0, 0, score(base, []))]
    rng = np.random.Generator(np.random.PCG64(seed))
    flat_all = rng.permutation(window.height * window.width)
    labels: list = []
    cache = None
    params = base
    for t in range(retrain_interval, session_seconds + 1, retrain_interval):
        want = t // seconds_per_label
        while len(labels) < want:
            flat = int(flat_all[len(labels)])
            r = flat // window.width + window.row0
            c = flat % window.width + window.col0
            labels.append(LabelPoint(r, c, int(scene.labels[r, c])))
        if labels:
            if cache is None:
                cache = build_feature_cache(base, scene.image, labels, config.tail_cut())
            params = run_finetune(base, scene.image, labels, config, cache=cache)
        series.append(SimPoint(t, len(labels), score(params, labels)))
    return series


def sim_to_rows(area_name, seed, series):
    rows = []
    for pt in series:
        rows.append([area_name, "sim-random", "random", seed, pt.label_count,
                     f"{pt.report.pixel_accuracy:.6f}", f"{pt.report.mean_iou:.6f}",
                     pt.elapsed_seconds])
    return rows


def _sim_cell(args):
    area_name, scene, base, config, seed, session_seconds, spl, interval = args
    series = simulate_random_labeler(scene, base, config, seed=seed,
                                     session_seconds=session_seconds,
                                     seconds_per_label=spl,
                                     retrain_interval=interval)
    return area_name, seed, series


def run_sim_grid(areas: dict, base: mdl.ModelParams, config: FineTuneConfig,
                 seeds: Sequence[int], session_seconds: int = 900,
                 seconds_per_label: int = 3, retrain_interval: int = 45,
                 workers: Optional[int] = None):
    """simulate_random_labeler over every (area, seed); returns a dict of series."""
    cells = [(name, areas[name], base, config, int(seed), session_seconds,
              seconds_per_label, retrain_interval)
             for name in sorted(areas) for seed in seeds]
    if workers is None:
        workers = min(os.cpu_count() or 1, len(cells))
    if workers > 1 and len(cells) > 1:
        with get_context("spawn").Pool(workers) as pool:
            results = pool.map(_sim_cell, cells)
    else:
        results = [_sim_cell(c) for c in cells]
    return {(name, seed): series for name, seed, series in results}


def history_to_rows(area_name, method, history, query="human", seed=0):
    """Session metrics history in the grid CSV schema (+elapsed column)."""
    t0 = history[0].timestamp if history else 0.0
    rows = []
    for entry in history:
        rows.append([area_name, method, query, seed, entry.label_count,
                     f"{entry.report.pixel_accuracy:.6f}",
                     f"{entry.report.mean_iou:.6f}",
                     int(entry.timestamp - t0)])
    return rows


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, entries: dict):
    """Key-value run record (seeds, config, versions) next to any output."""
    from . import __version__

    lines = [f"landloop_version={__version__}"]
    for key in sorted(entries):
        lines.append(f"{key}={entries[key]}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
