"""Query strategies against exhaustive oracles; the batched schedule."""

import math

import numpy as np
import pytest

from landloop import model
from landloop.errors import ConfigurationError, EmptyLabelsError
from landloop.finetune import FineTuneConfig
from landloop.query import (
    ExtentWindow,
    QueryMethod,
    QuerySchedule,
    run_schedule,
    select_points,
)
from landloop.synthdata import SceneConfig, generate_scene


def _window(h, w):
    return ExtentWindow(0, 0, h, w)


def _probs_from(rows):
    """[n, H, W] map from a nested list of per-pixel distributions."""
    arr = np.array(rows, dtype=np.float64)  # [H, W, n]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def entropy_oracle(p):
    n, h, w = p.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for c in range(n):
                v = float(p[c, i, j])
                if v > 0:
                    acc -= v * math.log(v)
            out[i, j] = acc
    return out


def margin_oracle(p):
    n, h, w = p.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            vals = sorted(float(p[c, i, j]) for c in range(n))
            out[i, j] = vals[-1] - vals[-2]
    return out


def test_entropy_picks_uniform_pixel():
    probs = _probs_from([[[1, 0, 0, 0], [0.25, 0.25, 0.25, 0.25]]])
    sel = select_points(QueryMethod("entropy"), probs, _window(1, 2), count=1)
    assert sel.positions == [(0, 1)]


def test_min_margin_picks_uniform_pixel():
    probs = _probs_from([[[1, 0, 0, 0], [0.25, 0.25, 0.25, 0.25]]])
    sel = select_points(QueryMethod("min-margin"), probs, _window(1, 2), count=1)
    assert sel.positions == [(0, 1)]


@pytest.mark.parametrize("kind", ["entropy", "min-margin"])
def test_full_pool_matches_exhaustive_sort(kind):
    rng = np.random.default_rng(17)
    raw = rng.random((4, 32, 32))
    probs = raw / raw.sum(axis=0, keepdims=True)
    window = _window(32, 32)
    count = 25
    sel = select_points(QueryMethod(kind, pool_size=32 * 32, seed=5), probs,
                        window, count=count)
    if kind == "entropy":
        score = -entropy_oracle(probs)
    else:
        score = margin_oracle(probs)
    flat = [(score[i, j], i, j) for i in range(32) for j in range(32)]
    flat.sort()
    want = [(i, j) for _, i, j in flat[:count]]
    assert sel.positions == want


def test_mistakes_all_disagree():
    rng = np.random.default_rng(3)
    raw = rng.random((4, 24, 24))
    probs = raw / raw.sum(axis=0, keepdims=True)
    truth = rng.integers(0, 4, size=(24, 24))
    sel = select_points(QueryMethod("mistakes", seed=1), probs, _window(24, 24),
                        ground_truth=truth, count=30)
    pred = probs.argmax(axis=0)
    assert not sel.fell_back_to_random
    for r, c in sel.positions:
        assert pred[r, c] != truth[r, c]


def test_mistakes_without_errors_falls_back():
    probs = np.zeros((2, 8, 8))
    probs[0] = 1.0
    truth = np.zeros((8, 8), dtype=int)  # prediction is always right
    sel = select_points(QueryMethod("mistakes", seed=2), probs, _window(8, 8),
                        ground_truth=truth, count=5)
    assert sel.fell_back_to_random
    assert len(sel.positions) == 5


def test_random_seed_determinism_and_exclusion():
    window = _window(16, 16)
    already = [(0, 0), (3, 3), (8, 8)]
    a = select_points(QueryMethod("random", seed=9), None, window, count=40,
                      already_selected=already)
    b = select_points(QueryMethod("random", seed=9), None, window, count=40,
                      already_selected=already)
    assert a.positions == b.positions
    assert len(set(a.positions)) == 40
    assert not (set(a.positions) & set(already))
    c = select_points(QueryMethod("random", seed=10), None, window, count=40)
    assert c.positions != a.positions


def test_selection_respects_window_offset():
    window = ExtentWindow(20, 20, 8, 8)
    sel = select_points(QueryMethod("random", seed=0), None, window, count=10)
    for r, c in sel.positions:
        assert 20 <= r < 28 and 20 <= c < 28


def test_count_exceeding_pool_errors():
    with pytest.raises(ConfigurationError):
        select_points(QueryMethod("random", pool_size=5), None, _window(8, 8),
                      count=6)


def test_missing_inputs_error():
    with pytest.raises(ConfigurationError):
        select_points(QueryMethod("entropy"), None, _window(4, 4), count=1)
    with pytest.raises(ConfigurationError):
        select_points(QueryMethod("mistakes"), np.full((2, 4, 4), 0.5),
                      _window(4, 4), count=1)


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        QuerySchedule((10, 10)).validate()
    with pytest.raises(ConfigurationError):
        QuerySchedule((0, 5)).validate()
    QuerySchedule().validate()


# ---------------------------------------------------------------------------
# run_schedule


@pytest.fixture(scope="module")
def area(desk_base):
    return generate_scene(SceneConfig(seed=210, width=128, height=128,
                                      shift_delta=0.7))


def test_schedule_counts_are_exact(desk_base, area):
    steps = run_schedule(area, desk_base, QueryMethod("random", seed=0),
                         FineTuneConfig(method="last-1", epochs=2),
                         QuerySchedule((10, 25, 60)))
    assert [s.label_count for s in steps] == [10, 25, 60]


def test_schedule_zero_epochs_equals_baseline(desk_base, area):
    from landloop import metrics

    steps = run_schedule(area, desk_base, QueryMethod("random", seed=0),
                         FineTuneConfig(method="last-1", epochs=0),
                         QuerySchedule((10,)))
    off = model.input_output_offset(desk_base.spec)
    probs = model.forward(desk_base, area.image)
    baseline = metrics.evaluate(probs, area.labels[off:-off, off:-off], n_classes=4)
    got = steps[0].report
    assert got.pixel_accuracy == baseline.pixel_accuracy
    assert got.mean_iou == baseline.mean_iou
    assert np.array_equal(got.confusion, baseline.confusion)


def test_schedule_nested_and_deterministic(desk_base, area):
    kw = dict(method=QueryMethod("min-margin", seed=4),
              config=FineTuneConfig(method="last-1", epochs=3),
              schedule=QuerySchedule((10, 30)))
    a = run_schedule(area, desk_base, kw["method"], kw["config"], kw["schedule"])
    b = run_schedule(area, desk_base, kw["method"], kw["config"], kw["schedule"])
    assert a[0].report.pixel_accuracy == b[0].report.pixel_accuracy
    assert a[1].report.pixel_accuracy == b[1].report.pixel_accuracy
    for n in a[1].params.tensors:
        assert np.array_equal(a[1].params.tensors[n], b[1].params.tensors[n])


def test_schedule_needs_truth(desk_base, area):
    from landloop.synthdata import Scene

    bare = Scene(image=area.image, labels=None, palette=area.palette)
    with pytest.raises(EmptyLabelsError):
        run_schedule(bare, desk_base, QueryMethod("random"),
                     FineTuneConfig(method="last-1"), QuerySchedule((5,)))
