"""Fine-tuning behavior: frozen trunks, cached features, convexity, the GA."""

import numpy as np
import pytest

from landloop import finetune, model, nn
from landloop.errors import (
    ConfigurationError,
    CoordinateError,
    EmptyLabelsError,
    StaleCacheError,
)
from landloop.finetune import FeatureCache, FineTuneConfig, GAConfig
from landloop.points import LabelPoint
from landloop.synthdata import SceneConfig, generate_scene

SPEC = model.ModelSpec.desk()
OFF = model.input_output_offset(SPEC)


@pytest.fixture(scope="module")
def setup(desk_base):
    scene = generate_scene(SceneConfig(seed=200, width=128, height=128,
                                       shift_delta=0.7))
    rng = np.random.default_rng(0)
    labels = []
    seen = set()
    while len(labels) < 60:
        r = int(rng.integers(OFF, 128 - OFF))
        c = int(rng.integers(OFF, 128 - OFF))
        if (r, c) not in seen:
            seen.add((r, c))
            labels.append(LabelPoint(r, c, int(scene.labels[r, c])))
    return desk_base, scene, labels


def tail_loss(base, params, labels, scene, k):
    cache = finetune.build_feature_cache(base, scene.image, labels, k)
    feats, classes = cache.gather(labels)
    probs = nn.tail_forward(model.tail_layers(base.spec, k), params.tensors, feats,
                            masks=params.masks)
    return nn.batch_ce_loss(probs, classes)


# ---------------------------------------------------------------------------
# feature cache


def test_cache_counts_each_label_once(setup):
    base, scene, labels = setup
    cache = finetune.build_feature_cache(base, scene.image, labels[:40], 2)
    assert cache.trunk_executions == 40
    cache = finetune.build_feature_cache(base, scene.image, labels[:40], 2, cache=cache)
    assert cache.trunk_executions == 40  # full hit: zero new trunk runs
    cache = finetune.build_feature_cache(base, scene.image, labels[:50], 2, cache=cache)
    assert cache.trunk_executions == 50  # exactly the 10 new labels


def test_cache_stale_fingerprint_rejected(setup):
    base, scene, labels = setup
    cache = finetune.build_feature_cache(base, scene.image, labels[:5], 2)
    bumped = base.with_tensors(
        {"enc0.conv1.weight": base.tensors["enc0.conv1.weight"] + 0.01})
    with pytest.raises(StaleCacheError):
        finetune.build_feature_cache(bumped, scene.image, labels[:5], 2, cache=cache)


def test_cache_survives_tail_changes_and_head_growth(setup):
    from landloop.sessions import grow_head

    base, scene, labels = setup
    cache = finetune.build_feature_cache(base, scene.image, labels[:5], 1)
    retuned = base.with_tensors({"head.weight": base.tensors["head.weight"] * 2})
    finetune.build_feature_cache(retuned, scene.image, labels[:5], 1, cache=cache)
    grown = grow_head(base)
    finetune.build_feature_cache(grown, scene.image, labels[:5], 1, cache=cache)


def test_cache_equals_per_label_extraction(setup):
    """Oracle: features from one-at-a-time public extract_features calls."""
    base, scene, labels = setup
    k = 2
    t = model.tail_shrink(k)
    ctx = model.min_input_extent(SPEC)
    cache = finetune.build_feature_cache(base, scene.image, labels[:10], k)
    h, w = scene.image.shape[-2:]
    for p in labels[:10]:
        pr = min(max(p.row - ctx // 2, 0), h - ctx)
        pc = min(max(p.col - ctx // 2, 0), w - ctx)
        patch = scene.image[:, pr:pr + ctx, pc:pc + ctx]
        feats = model.extract_features(base, patch, k)
        orow, ocol = p.row - pr - OFF, p.col - pc - OFF
        want = feats[:, orow:orow + t + 1, ocol:ocol + t + 1]
        np.testing.assert_allclose(cache.features[(p.row, p.col)], want, atol=1e-6)


def test_finetune_cached_equals_fresh(setup):
    base, scene, labels = setup
    config = FineTuneConfig(method="last-2")
    cache = finetune.build_feature_cache(base, scene.image, labels, 2)
    via_cache = finetune.finetune_last_k(base, 2, scene.image, labels, config,
                                         cache=cache)
    fresh = finetune.finetune_last_k(base, 2, scene.image, labels, config)
    loss_a = tail_loss(base, via_cache, labels, scene, 2)
    loss_b = tail_loss(base, fresh, labels, scene, 2)
    assert abs(loss_a - loss_b) < 1e-5


def test_labels_outside_predictable_extent_rejected(setup):
    base, scene, _ = setup
    with pytest.raises(CoordinateError):
        finetune.build_feature_cache(base, scene.image,
                                     [LabelPoint(2, 50, 0)], 1)


# ---------------------------------------------------------------------------
# last-k


def test_last_k_only_touches_tail(setup):
    base, scene, labels = setup
    for k in (1, 2, 3):
        out = finetune.finetune_last_k(base, k, scene.image, labels,
                                       FineTuneConfig(method=f"last-{k}"))
        allowed = set(model.trainable_names(SPEC, "last-k", k))
        changed = {n for n in base.tensors
                   if not np.array_equal(base.tensors[n], out.tensors[n])}
        assert changed <= allowed
        assert changed  # it did learn something
        for n in set(base.tensors) - allowed:
            assert out.tensors[n] is base.tensors[n] or \
                np.array_equal(out.tensors[n], base.tensors[n])


def test_finetune_deterministic(setup):
    base, scene, labels = setup
    config = FineTuneConfig(method="last-2")
    a = finetune.finetune_last_k(base, 2, scene.image, labels, config)
    b = finetune.finetune_last_k(base, 2, scene.image, labels, config)
    for n in a.tensors:
        assert np.array_equal(a.tensors[n], b.tensors[n])


def test_loss_never_degrades(setup):
    base, scene, labels = setup
    for method in ("last-1", "last-2", "last-3", "group-params"):
        config = FineTuneConfig(method=method)
        out = finetune.run_finetune(base, scene.image, labels, config)
        cut = config.tail_cut()
        before = tail_loss(base, base, labels, scene, cut)
        after = tail_loss(base, out, labels, scene, cut)
        assert after <= before + 1e-12, method


def test_saturated_correct_labels_are_a_fixed_point(setup):
    base, scene, labels = setup
    # blow up the head so confident points saturate to an exact one-hot
    boosted = base.with_tensors({"head.weight": base.tensors["head.weight"] * 250,
                                 "head.bias": base.tensors["head.bias"] * 250})
    cache = finetune.build_feature_cache(boosted, scene.image, labels, 1)
    feats, classes = cache.gather(labels)
    probs = nn.tail_forward(model.tail_layers(SPEC, 1), boosted.tensors, feats)
    p = probs[:, :, 0, 0]
    exact = (p[np.arange(len(classes)), classes] == 1.0) & \
        ((p > 0).sum(axis=1) == 1)
    sure = [pt for pt, h in zip(labels, exact) if h]
    assert len(sure) >= 10
    out = finetune.finetune_last_k(boosted, 1, scene.image, sure,
                                   FineTuneConfig(method="last-1"))
    delta = sum(float(np.abs(out.tensors[n] - boosted.tensors[n]).sum())
                for n in out.tensors)
    assert delta < 1e-6
    assert tail_loss(boosted, out, sure, scene, 1) == pytest.approx(0.0, abs=1e-7)


def test_zero_epochs_is_identity(setup):
    base, scene, labels = setup
    config = FineTuneConfig(method="group-params", epochs=0)
    out = finetune.finetune_group_params(base, scene.image, labels, config)
    for n in base.tensors:
        assert np.array_equal(out.tensors[n], base.tensors[n])


def test_last1_convergence_beats_direct_solver(setup):
    """k=1 on one point is convex softmax regression; both routes reach ~0."""
    base, scene, labels = setup
    one = labels[:1]
    config = FineTuneConfig(method="last-1", to_convergence=True)
    out = finetune.finetune_last_k(base, 1, scene.image, one, config)
    ours = tail_loss(base, out, one, scene, 1)
    assert ours < 1e-3

    # independent solver: plain gradient descent in float64 on the one feature
    cache = finetune.build_feature_cache(base, scene.image, one, 1)
    f = cache.features[(one[0].row, one[0].col)][:, 0, 0].astype(np.float64)
    w = base.tensors["head.weight"].astype(np.float64).copy()
    b = base.tensors["head.bias"].astype(np.float64).copy()
    y = one[0].cls
    for _ in range(4000):
        logits = w @ f + b
        p = np.exp(logits - logits.max())
        p /= p.sum()
        g = p.copy()
        g[y] -= 1.0
        w -= 0.05 * np.outer(g, f)
        b -= 0.05 * g
    logits = w @ f + b
    p = np.exp(logits - logits.max())
    p /= p.sum()
    solver_loss = -np.log(p[y])
    assert solver_loss < 1e-3


def test_convergence_mode_reaches_tolerance(setup):
    base, scene, labels = setup
    config = FineTuneConfig(method="last-1", to_convergence=True)
    out = finetune.finetune_last_k(base, 1, scene.image, labels, config)
    loss = tail_loss(base, out, labels, scene, 1)
    ten = finetune.finetune_last_k(base, 1, scene.image, labels,
                                   FineTuneConfig(method="last-1", epochs=10))
    assert loss <= tail_loss(base, ten, labels, scene, 1) + 1e-9


def test_bad_inputs(setup):
    base, scene, labels = setup
    with pytest.raises(ConfigurationError):
        finetune.finetune_last_k(base, 4, scene.image, labels,
                                 FineTuneConfig(method="last-1"))
    with pytest.raises(EmptyLabelsError):
        finetune.finetune_last_k(base, 1, scene.image, [],
                                 FineTuneConfig(method="last-1"))
    with pytest.raises(ConfigurationError):
        FineTuneConfig(method="nope").validate()
    with pytest.raises(ConfigurationError):
        FineTuneConfig(method="last-1", learning_rate=-1.0).validate()


def test_incremental_warm_start(setup):
    base, scene, labels = setup
    config = FineTuneConfig(method="last-1", epochs=4)
    first = finetune.finetune_last_k(base, 1, scene.image, labels[:30], config)
    warm_cfg = FineTuneConfig(method="last-1", epochs=4, reinit_from_base=False)
    warm = finetune.finetune_last_k(base, 1, scene.image, labels, warm_cfg,
                                    start=first)
    cold = finetune.finetune_last_k(base, 1, scene.image, labels, config)
    # warm start departs from the previous fit, not from base
    assert not np.array_equal(warm.tensors["head.weight"],
                              cold.tensors["head.weight"])
    loss_warm = tail_loss(base, warm, labels, scene, 1)
    loss_first = tail_loss(base, first, labels, scene, 1)
    assert loss_warm <= loss_first + 1e-12


def test_default_learning_rates():
    assert FineTuneConfig(method="last-1").resolved_lr() == 0.01
    assert FineTuneConfig(method="last-2").resolved_lr() == 0.005
    assert FineTuneConfig(method="last-3").resolved_lr() == 0.001
    assert FineTuneConfig(method="group-params").resolved_lr() == 0.0025


# ---------------------------------------------------------------------------
# group params


def test_group_params_only_touches_gamma_beta(setup):
    base, scene, labels = setup
    out = finetune.finetune_group_params(base, scene.image, labels,
                                         FineTuneConfig(method="group-params"))
    changed = {n for n in base.tensors
               if not np.array_equal(base.tensors[n], out.tensors[n])}
    assert changed == {"dec0.gn.gamma", "dec0.gn.beta"}
    for n in base.tensors:
        if n.endswith(".weight") or n.endswith(".bias"):
            assert np.array_equal(out.tensors[n], base.tensors[n])


def test_group_params_gradient_matches_finite_differences(setup):
    base, scene, labels = setup
    cache = finetune.build_feature_cache(base, scene.image, labels[:12], 2)
    feats, classes = cache.gather(labels[:12])
    feats64 = feats.astype(np.float64)
    t64 = {k: v.astype(np.float64) for k, v in base.tensors.items()}
    layers = model.tail_layers(SPEC, 2)
    names = ["dec0.gn.gamma", "dec0.gn.beta"]
    _, grads = nn.backward_tail_batch(layers, t64, feats64, classes, names)
    rng = np.random.default_rng(1)
    for name in names:
        flat = t64[name].reshape(-1)
        gf = grads[name].reshape(-1)
        for i in rng.choice(flat.size, size=8, replace=False):
            orig = flat[i]
            flat[i] = orig + 1e-5
            lp = nn.batch_ce_loss(nn.tail_forward(layers, t64, feats64), classes)
            flat[i] = orig - 1e-5
            lm = nn.batch_ce_loss(nn.tail_forward(layers, t64, feats64), classes)
            flat[i] = orig
            fd = (lp - lm) / 2e-5
            assert abs(fd - gf[i]) <= 1e-4 * max(abs(fd), abs(gf[i]), 1e-8)


# ---------------------------------------------------------------------------
# dropout GA


def test_ga_identity_individual_scores_unmasked_loss(setup):
    base, scene, labels = setup
    cut = 3
    unmasked = tail_loss(base, base, labels, scene, cut)
    ones = {"dec0.conv1": np.ones(16, dtype=np.uint8),
            "dec0.conv2": np.ones(16, dtype=np.uint8)}
    cache = finetune.build_feature_cache(base, scene.image, labels, cut)
    feats, classes = cache.gather(labels)
    probs = nn.tail_forward(model.tail_layers(SPEC, cut), base.tensors, feats,
                            masks=ones)
    assert nn.batch_ce_loss(probs, classes) == unmasked


def test_ga_monotone_and_bounded_by_identity(setup):
    base, scene, labels = setup
    ga = GAConfig(generations=12, population=12, seed=3)
    res = finetune.finetune_dropout_ga(base, scene.image, labels, ga)
    assert all(a >= b for a, b in zip(res.best_losses, res.best_losses[1:]))
    unmasked = tail_loss(base, base, labels, scene, 3)
    assert res.best_losses[-1] <= unmasked + 1e-12
    final = tail_loss(base, res.params, labels, scene, 3)
    assert final == pytest.approx(res.best_losses[-1], abs=1e-9)
    assert set(res.masks) == {"dec0.conv1", "dec0.conv2"}
    for n in base.tensors:  # weights untouched, only masks ride along
        assert np.array_equal(res.params.tensors[n], base.tensors[n])


def test_ga_deterministic(setup):
    base, scene, labels = setup
    ga = GAConfig(generations=5, population=8, seed=11)
    a = finetune.finetune_dropout_ga(base, scene.image, labels[:20], ga)
    b = finetune.finetune_dropout_ga(base, scene.image, labels[:20], ga)
    assert a.best_losses == b.best_losses
    for n in a.masks:
        assert np.array_equal(a.masks[n], b.masks[n])


def test_ga_config_validation(setup):
    base, scene, labels = setup
    with pytest.raises(ConfigurationError):
        finetune.finetune_dropout_ga(base, scene.image, labels,
                                     GAConfig(population=1))
    with pytest.raises(ConfigurationError):
        finetune.finetune_dropout_ga(base, scene.image, labels,
                                     GAConfig(masked_layers=5))
    with pytest.raises(ConfigurationError):
        GAConfig(mean_dropout=1.5).validate()


def test_masked_forward_consistent_between_tail_and_full(setup):
    base, scene, labels = setup
    ga = GAConfig(generations=3, population=6, seed=2)
    res = finetune.finetune_dropout_ga(base, scene.image, labels[:20], ga)
    crop = scene.image[:, :64, :64]
    full = model.forward(res.params, crop)
    feats = model.extract_features(base, crop, 3)
    composed = model.tail_apply(base, 3, feats, masks=res.masks)
    np.testing.assert_allclose(full, composed, atol=1e-6)
