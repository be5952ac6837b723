from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import make_blobs
from oracles import central_difference, naive_class_means, nearest_centroid_scan, silhouette_naive

from fewbase.classifiers import (
    STEP1_CONFIG,
    LOGREG_CONFIG,
    DimensionMismatchError,
    LinearHead,
    fit_linear_head,
    fit_logistic_regression,
    fit_ncm,
    head_loss_and_grad,
    logreg_accuracy,
    ncm_accuracy,
    predict_ncm,
    predict_softmax,
    silhouette_score,
)
from fewbase.episodes import sample_uniform_episode
from fewbase.training import TrainConfig


def test_ncm_two_points():
    model = fit_ncm(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([0, 1]))
    np.testing.assert_array_equal(model.centroids, [[0, 0], [1, 1]])
    labels, dist = predict_ncm(model, np.array([[0.1, 0.1]]))
    assert labels[0] == 0
    assert dist.shape == (1, 2)


def test_ncm_tie_goes_to_lower_index():
    model = fit_ncm(np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([1, 0]))
    labels, _ = predict_ncm(model, np.array([[1.0, 0.0], [1.0, 5.0]]))
    np.testing.assert_array_equal(labels, [0, 0])


def test_ncm_centroids_match_mean_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((25, 6))
    y = np.repeat(np.arange(5), 5)
    np.testing.assert_allclose(fit_ncm(x, y).centroids, naive_class_means(x, y, 5), atol=1e-12)


def test_ncm_duplicated_rows_do_not_move_centroid():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 3))
    y = np.array([0, 0, 0, 1, 1, 1])
    a = fit_ncm(x, y).centroids
    b = fit_ncm(np.vstack([x, x]), np.concatenate([y, y])).centroids
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_ncm_matches_exhaustive_scan():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((20, 4))
    y = np.repeat(np.arange(4), 5)
    q = rng.standard_normal((1000, 4))
    model = fit_ncm(x, y)
    np.testing.assert_array_equal(predict_ncm(model, q)[0], nearest_centroid_scan(model.centroids, q))


def test_ncm_rigid_motion_invariance():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((15, 5))
    y = np.repeat(np.arange(3), 5)
    q = rng.standard_normal((40, 5))
    ref = predict_ncm(fit_ncm(x, y), q)[0]
    for _ in range(100):
        rot, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        shift = rng.standard_normal(5) * 10
        labels = predict_ncm(fit_ncm(x @ rot + shift, y), q @ rot + shift)[0]
        np.testing.assert_array_equal(labels, ref)


def test_ncm_errors():
    with pytest.raises(ValueError):
        fit_ncm(np.zeros((2, 2)), np.array([0, 2]), ways=3)
    with pytest.raises(DimensionMismatchError):
        predict_ncm(fit_ncm(np.zeros((2, 2)), np.array([0, 1])), np.zeros((1, 3)))


def test_ncm_center_and_normalize_flags():
    x = np.array([[1.0, 0.0], [0.0, 3.0]])
    model = fit_ncm(x, np.array([0, 1]), normalize=True)
    np.testing.assert_allclose(np.linalg.norm(model.centroids, axis=1), 1.0)
    assert predict_ncm(model, np.array([[10.0, 1.0]]))[0][0] == 0
    centered = fit_ncm(x, np.array([0, 1]), center=True)
    np.testing.assert_allclose(centered.centroids.sum(axis=0), 0.0, atol=1e-12)


def test_softmax_zero_head_uniform():
    head = LinearHead(np.zeros((4, 3)), np.zeros(4))
    np.testing.assert_allclose(predict_softmax(head, np.ones((5, 3))), 0.25)


def test_softmax_shift_invariance_and_rows():
    rng = np.random.default_rng(4)
    head = LinearHead(rng.standard_normal((6, 3)), rng.standard_normal(6))
    x = rng.standard_normal((10, 3))
    p = predict_softmax(head, x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    shifted = LinearHead(head.weights, head.bias + 123.0)
    np.testing.assert_allclose(predict_softmax(shifted, x), p, atol=1e-7)
    with pytest.raises(DimensionMismatchError):
        predict_softmax(head, np.zeros((1, 4)))


def test_head_gradient_vs_finite_difference():
    rng = np.random.default_rng(5)
    for _ in range(10):
        n, d, c = 7, int(rng.integers(1, 8)), int(rng.integers(2, 6))
        x, y = rng.standard_normal((n, d)), rng.integers(0, c, n)
        fn = head_loss_and_grad(x, y, weight_decay=0.1)
        params = {"W": rng.standard_normal((c, d)), "b": rng.standard_normal(c)}
        _, grads = fn(params, np.arange(n))
        for key in ("W", "b"):
            num = central_difference(lambda p: fn(p, np.arange(n))[0], params, key)
            assert np.linalg.norm(grads[key] - num) <= 1e-4 * np.linalg.norm(num)


def test_fit_linear_head_separable():
    rng = np.random.default_rng(6)
    x = np.vstack([rng.normal(-3, 1, (200, 2)), rng.normal(3, 1, (200, 2))])
    y = np.repeat([0, 1], 200)
    from fewbase.datastore import FeatureSet

    fs = FeatureSet(x, y, ["neg", "pos"])
    head = fit_linear_head(fs)
    assert np.mean(head.logits(x).argmax(axis=1) == y) > 0.95
    assert all(b <= a + 1e-6 for a, b in zip(head.loss_history, head.loss_history[1:]))


def test_step1_default_is_ten_epochs_adam():
    assert (STEP1_CONFIG.epochs, STEP1_CONFIG.learning_rate, STEP1_CONFIG.optimizer) == (10, 1e-3, "adam")


def test_fit_linear_head_zero_lr_and_determinism(blobs):
    head = fit_linear_head(blobs, TrainConfig(learning_rate=0.0))
    assert not head.weights.any() and not head.bias.any()
    a = fit_linear_head(blobs, TrainConfig(seed=3))
    b = fit_linear_head(blobs, TrainConfig(seed=3))
    assert np.array_equal(a.weights, b.weights)


def test_fit_linear_head_single_class_rejected():
    from fewbase.datastore import FeatureSet

    with pytest.raises(ValueError):
        fit_linear_head(FeatureSet(np.ones((3, 2)), [0, 0, 0], ["only"]))


def test_head_json_round_trip(tmp_path, blobs):
    head = fit_linear_head(blobs)
    head.save(tmp_path / "h.json")
    back = LinearHead.load(tmp_path / "h.json")
    np.testing.assert_array_equal(back.weights, head.weights.astype(np.float32))
    np.testing.assert_allclose(back.bias, head.bias)


def test_logreg_orthogonal_points():
    x = np.eye(4)
    head = fit_logistic_regression(x, np.arange(4))
    np.testing.assert_array_equal(head.logits(x).argmax(axis=1), np.arange(4))


def test_logreg_zero_epochs_returns_init():
    head = fit_logistic_regression(np.eye(3), np.arange(3), LOGREG_CONFIG.with_(epochs=0))
    assert not head.weights.any() and not head.bias.any()


def test_logreg_close_to_ncm_on_blobs():
    fs = make_blobs(10, 40, 8, seed=7, spread=2.0)
    lr, ncm = [], []
    for seed in range(30):
        ep = sample_uniform_episode(fs, 5, 5, 15, seed)
        args = (ep.support_features, ep.support_labels, ep.query_features, ep.query_labels)
        lr.append(logreg_accuracy(*args, ways=5))
        ncm.append(ncm_accuracy(*args, ways=5))
    assert np.mean(lr) >= np.mean(ncm) - 0.05


def test_silhouette_four_points():
    x = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
    y = np.array([0, 0, 1, 1])
    expected = 1 - 2 / (10 + math.sqrt(101))
    assert abs(silhouette_score(x, y) - expected) < 1e-9


def test_silhouette_matches_references():
    sklearn_metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(8)
    for _ in range(5):
        x = rng.standard_normal((40, 3))
        y = rng.integers(0, 4, 40)
        s = silhouette_score(x, y)
        assert abs(s - sklearn_metrics.silhouette_score(x, y)) < 1e-9
        assert abs(s - silhouette_naive(x, y)) < 1e-9


def test_silhouette_separated_and_random():
    fs = make_blobs(2, 30, 2, seed=9, spread=100.0)
    assert silhouette_score(fs.features, fs.labels) > 0.9
    rng = np.random.default_rng(10)
    x = rng.standard_normal((200, 3))
    for _ in range(20):
        assert abs(silhouette_score(x, rng.integers(0, 3, 200))) < 0.1


def test_silhouette_singleton_and_errors():
    x = np.array([[0.0], [1.0], [5.0]])
    y = np.array([0, 0, 1])
    ref = silhouette_naive(x, y)
    assert silhouette_score(x, y) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        silhouette_score(x, np.zeros(3))
