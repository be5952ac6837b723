from __future__ import annotations

import numpy as np
import pytest
from conftest import make_blobs
from oracles import central_difference

from fewbase.adapters import (
    IDENTITY,
    MODES,
    FinetuneConfig,
    AdapterModel,
    _joint_loss_and_grad,
    apply_adapter,
    finetune_on_support,
    finetune_two_step,
    init_adapter,
)
from fewbase.classifiers import DimensionMismatchError, ncm_accuracy, predict_ncm, fit_ncm
from fewbase.datastore import FeatureSet, fit_standardization, synthetic_class_names
from fewbase.episodes import sample_uniform_episode
from fewbase.selection import ClassSubset


def test_defaults_follow_schedule():
    cfg = FinetuneConfig()
    assert (cfg.step1.optimizer, cfg.step1.learning_rate, cfg.step1.epochs) == ("adam", 1e-3, 10)
    assert (cfg.step2.optimizer, cfg.step2.momentum, cfg.step2.learning_rate, cfg.step2.epochs) == (
        "sgd_nesterov",
        0.9,
        1e-3,
        20,
    )
    assert cfg.subset_cap == 10_000


def test_identity_returns_input_object():
    x = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32)
    assert apply_adapter(IDENTITY, x) is x


def test_residual_zero_is_exact_identity():
    x = np.random.default_rng(1).standard_normal((50, 6))
    adapter = init_adapter("square_residual", 6, np.random.default_rng(0))
    out = apply_adapter(adapter, x)
    assert out.tobytes() == x.tobytes()


def test_square_matches_per_row_oracle():
    rng = np.random.default_rng(2)
    adapter = init_adapter("square", 5, rng)
    x = rng.standard_normal((8, 5))
    ref = np.array([[sum(adapter.transform[i, j] * row[j] for j in range(5)) + adapter.bias[i] for i in range(5)] for row in x])
    np.testing.assert_allclose(apply_adapter(adapter, x), ref, atol=1e-6)
    bound = 1 / np.sqrt(5)
    assert np.abs(adapter.transform).max() <= bound


def test_projection_dimension():
    adapter = init_adapter("projection", 6, np.random.default_rng(3), projection_dim=2)
    assert apply_adapter(adapter, np.ones((3, 6))).shape == (3, 2)
    with pytest.raises(ValueError):
        init_adapter("projection", 4, np.random.default_rng(0), projection_dim=5)


def test_dimension_mismatch():
    adapter = init_adapter("square", 4, np.random.default_rng(0))
    with pytest.raises(DimensionMismatchError):
        apply_adapter(adapter, np.ones((2, 3)))


def test_unknown_mode():
    with pytest.raises(ValueError):
        AdapterModel("bn")


@pytest.mark.parametrize("residual", [False, True])
def test_joint_gradient_vs_finite_difference(residual):
    rng = np.random.default_rng(4)
    for _ in range(5):
        n, d, c = 6, int(rng.integers(2, 6)), int(rng.integers(2, 5))
        x, y = rng.standard_normal((n, d)), rng.integers(0, c, n)
        fn = _joint_loss_and_grad(x, y, residual, weight_decay=0.05)
        params = {
            "A": rng.standard_normal((d, d)) * 0.3,
            "c": rng.standard_normal(d),
            "W": rng.standard_normal((c, d)),
            "b": rng.standard_normal(c),
        }
        _, grads = fn(params, np.arange(n))
        for key in params:
            num = central_difference(lambda p: fn(p, np.arange(n))[0], params, key)
            assert np.linalg.norm(grads[key] - num) <= 1e-4 * np.linalg.norm(num)


def test_zero_step2_lr_keeps_identity(blobs):
    cfg = FinetuneConfig().with_(step2=FinetuneConfig().step2.with_(learning_rate=0.0))
    adapter, _ = finetune_two_step(blobs, ClassSubset((0, 1, 2)), "square_residual", cfg)
    x = blobs.features.astype(np.float64)
    assert apply_adapter(adapter, x).tobytes() == x.tobytes()
    ep = sample_uniform_episode(blobs, 3, 2, 4, 0)
    s, q = apply_adapter(adapter, ep.support_features), apply_adapter(adapter, ep.query_features)
    np.testing.assert_array_equal(
        predict_ncm(fit_ncm(s, ep.support_labels), q)[0],
        predict_ncm(fit_ncm(ep.support_features, ep.support_labels), ep.query_features)[0],
    )


def test_stats_only_equals_standardization(blobs):
    subset = ClassSubset((1, 4))
    adapter, head = finetune_two_step(blobs, subset, "stats_only")
    ref = fit_standardization(blobs, subset)
    np.testing.assert_array_equal(adapter.stats.mean, ref.mean)
    np.testing.assert_array_equal(adapter.stats.std, ref.std)
    assert head.num_classes == 2


def test_training_rows_capped():
    fs = make_blobs(4, 4000, 3)
    adapter, _ = finetune_two_step(fs, ClassSubset((0, 1, 2, 3)), "square", FinetuneConfig(step2=FinetuneConfig().step2.with_(epochs=1)))
    assert adapter.meta["train_rows"] == 10_000


def test_finetune_deterministic_and_finite(blobs):
    a, ha = finetune_two_step(blobs, ClassSubset((0, 2, 5)), "square", FinetuneConfig(seed=9))
    b, hb = finetune_two_step(blobs, ClassSubset((0, 2, 5)), "square", FinetuneConfig(seed=9))
    assert np.array_equal(a.transform, b.transform) and np.array_equal(ha.weights, hb.weights)
    assert np.isfinite(a.meta["step1_loss"]).all() and np.isfinite(a.meta["step2_loss"]).all()
    assert len(a.meta["step1_loss"]) == 11 and len(a.meta["step2_loss"]) == 21


def test_empty_subset_rejected(blobs):
    with pytest.raises(ValueError):
        finetune_two_step(blobs, [], "square")


@pytest.mark.parametrize("mode", MODES)
def test_adapter_json_round_trip(tmp_path, blobs, mode):
    adapter, _ = finetune_two_step(blobs, ClassSubset((0, 1)), mode, FinetuneConfig(projection_dim=3, step2=FinetuneConfig().step2.with_(epochs=1)))
    adapter.save(tmp_path / "a.json")
    back = AdapterModel.load(tmp_path / "a.json")
    x = blobs.features[:5]
    np.testing.assert_allclose(apply_adapter(back, x), apply_adapter(adapter, x), atol=1e-5)


def test_support_frozen_one_shot_fits_support():
    # class means on distinct axes: separable by construction
    rng = np.random.default_rng(5)
    y = np.repeat(np.arange(5), 4)
    fs = FeatureSet(5 * np.eye(5)[y] + 0.1 * rng.standard_normal((20, 5)), y, synthetic_class_names(5))
    ep = sample_uniform_episode(fs, 5, 1, 3, 1)
    adapter, head = finetune_on_support(ep, "square_residual", FinetuneConfig(), frozen=True)
    assert not adapter.transform.any()
    pred = head.logits(apply_adapter(adapter, ep.support_features)).argmax(axis=1)
    np.testing.assert_array_equal(pred, ep.support_labels)


def test_support_zero_step2_epochs_equals_frozen():
    fs = make_blobs(5, 10, 4)
    ep = sample_uniform_episode(fs, 5, 2, 3, 2)
    cfg = FinetuneConfig().with_(step2=FinetuneConfig().step2.with_(epochs=0))
    a, ha = finetune_on_support(ep, "square", cfg)
    b, hb = finetune_on_support(ep, "square", cfg, frozen=True)
    assert np.array_equal(a.transform, b.transform) and np.array_equal(ha.weights, hb.weights)


def test_aligned_subset_improves_ncm(universe):
    adapter, _ = finetune_two_step(universe.base, universe.truth, "square_residual")
    deltas = []
    for seed in range(100):
        ep = sample_uniform_episode(universe.target, 5, 5, 15, seed)
        base = ncm_accuracy(ep.support_features, ep.support_labels, ep.query_features, ep.query_labels, 5)
        s, q = apply_adapter(adapter, ep.support_features), apply_adapter(adapter, ep.query_features)
        deltas.append(ncm_accuracy(s, ep.support_labels, q, ep.query_labels, 5) - base)
    assert np.mean(deltas) > 0
