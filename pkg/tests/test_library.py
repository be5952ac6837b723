from __future__ import annotations

import numpy as np
import pytest
from conftest import make_blobs
from oracles import ward_reference

from fewbase.adapters import FinetuneConfig, apply_adapter
from fewbase.datastore import class_centroids, fit_standardization
from fewbase.library import (
    ClassPartition,
    ExtractorLibrary,
    LibraryBuildError,
    build_class_representation,
    build_library,
    cut_dendrogram,
    random_partition,
    ward_cluster,
    ward_linkage,
)

FAST = FinetuneConfig(step2=FinetuneConfig().step2.with_(epochs=2))


def _merges(d):
    return [(m.left, m.right, m.distance, m.size) for m in d.merges]


def _same(ours, ref):
    assert [(a, b, s) for a, b, _, s in ours] == [(a, b, s) for a, b, _, s in ref]
    np.testing.assert_allclose([m[2] for m in ours], [m[2] for m in ref], rtol=1e-9, atol=1e-12)


def test_ward_matches_reference_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 13))
        pts = rng.standard_normal((n, int(rng.integers(1, 5))))
        _same(_merges(ward_linkage(pts)), ward_reference(pts))


def test_ward_matches_reference_with_ties():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(2, 10))
        pts = rng.integers(0, 3, (n, 2)).astype(float)
        _same(_merges(ward_linkage(pts)), ward_reference(pts))


def test_ward_matches_scipy_linkage():
    hierarchy = pytest.importorskip("scipy.cluster.hierarchy")
    rng = np.random.default_rng(2)
    for _ in range(20):
        pts = rng.standard_normal((15, 3))
        ours = ward_linkage(pts).as_linkage()
        ref = hierarchy.linkage(pts, method="ward")
        np.testing.assert_allclose(ours[:, 2], ref[:, 2], rtol=1e-9)
        np.testing.assert_array_equal(np.sort(ours[:, :2], axis=1), np.sort(ref[:, :2], axis=1))
        np.testing.assert_array_equal(ours[:, 3], ref[:, 3])


def test_ward_monotone_and_size():
    pts = np.random.default_rng(3).standard_normal((30, 4))
    d = ward_linkage(pts)
    dist = [m.distance for m in d.merges]
    assert len(d.merges) == 29 and all(b >= a - 1e-12 for a, b in zip(dist, dist[1:]))
    assert d.merges[-1].size == 30


def test_two_far_pairs():
    pts = np.array([[0, 0], [0, 1], [100, 0], [100, 1]], dtype=float)
    d, part = ward_cluster(pts, 2)
    assert {(m.left, m.right) for m in d.merges[:2]} == {(0, 1), (2, 3)}
    np.testing.assert_array_equal(part.assignment, [0, 0, 1, 1])


def test_single_cluster_and_duplicates():
    pts = np.array([[1.0, 1.0], [1.0, 1.0], [5.0, 5.0]])
    d, part = ward_cluster(pts, 1)
    assert d.merges[0].distance == 0.0 and (d.merges[0].left, d.merges[0].right) == (0, 1)
    assert part.sizes().tolist() == [3]
    with pytest.raises(ValueError):
        cut_dendrogram(d, 4)


def _same_partition(a, b):
    same_a = a[:, None] == a[None, :]
    same_b = b[:, None] == b[None, :]
    return np.array_equal(same_a, same_b)


def test_ward_permutation_invariant():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((20, 3))
    _, ref = ward_cluster(pts, 5)
    for _ in range(10):
        perm = rng.permutation(20)
        _, part = ward_cluster(pts[perm], 5)
        inverse = np.empty(20, dtype=int)
        inverse[perm] = np.arange(20)
        assert _same_partition(part.assignment[inverse], ref.assignment)


def test_dendrogram_csv(tmp_path):
    d = ward_linkage(np.random.default_rng(5).standard_normal((5, 2)))
    d.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "step,left,right,distance,size" and len(lines) == 5


def test_representations(universe):
    table = class_centroids(universe.base)
    np.testing.assert_array_equal(build_class_representation("V", table), table.centroids)
    assert build_class_representation("R", table) is None
    with pytest.raises(ValueError):
        build_class_representation("X", table)
    x = build_class_representation("X", table, table.centroids)
    d = table.centroids.shape[1]
    np.testing.assert_allclose(x[:, :d].mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(x[:, d:].mean(axis=0), 0, atol=1e-12)
    np.testing.assert_array_equal(build_class_representation("Se", table, universe.semantic), universe.semantic)


def test_x_block_norms_before_centering(universe):
    from fewbase.library import _normalize_center

    block = class_centroids(universe.base).centroids
    centered = _normalize_center(block)
    unit = block / np.linalg.norm(block, axis=1, keepdims=True)
    np.testing.assert_allclose(centered + unit.mean(axis=0), unit, atol=1e-12)
    assert np.all(np.linalg.norm(unit, axis=1) <= 1 + 1e-6)


def test_x_clusters_recover_domains(universe):
    rep = build_class_representation("X", class_centroids(universe.base), universe.semantic)
    _, part = ward_cluster(rep, universe.config.latent_domains, "X")
    assert _same_partition(part.assignment, universe.domain_of_class)


def test_random_partition():
    p = random_partition(20, 20, seed=1)
    assert sorted(p.assignment.tolist()) == list(range(20))
    q = random_partition(712, 11, seed=2)
    assert q.sizes().min() >= 1 and q.sizes().sum() == 712
    assert q.sizes().mean() == pytest.approx(712 / 11)
    assert np.array_equal(random_partition(50, 7, 3).assignment, random_partition(50, 7, 3).assignment)
    with pytest.raises(ValueError):
        random_partition(3, 4)


def test_random_partition_hard_case_nonempty():
    # 11 clusters over 12 classes rarely hits all clusters by chance
    p = random_partition(12, 11, seed=0)
    assert p.sizes().min() >= 1


def test_partition_validation():
    with pytest.raises(ValueError):
        ClassPartition(np.array([0, 0, 2]), 3)


def test_library_sizes_and_round_trip(tmp_path, blobs):
    one = build_library(blobs, ClassPartition(np.zeros(6, dtype=int), 1), "square_residual", FAST)
    assert len(one) == 2 and one.entries[one.base_index].is_base
    _, part = ward_cluster(class_centroids(blobs).centroids, 3)
    lib = build_library(blobs, part, "square", FAST)
    lib.save(tmp_path / "lib")
    back = ExtractorLibrary.load(tmp_path / "lib")
    assert len(back) == 4 and back.base_index == 3
    for a, b in zip(lib.entries, back.entries):
        assert a.subset.ids == b.subset.ids and a.cluster == b.cluster
        np.testing.assert_allclose(apply_adapter(b.adapter, blobs.features[:4]), apply_adapter(a.adapter, blobs.features[:4]), atol=1e-4)


def test_eleven_clusters_give_twelve_entries():
    fs = make_blobs(22, 6, 3)
    _, part = ward_cluster(class_centroids(fs).centroids, 11)
    lib = build_library(fs, part, "stats_only", FAST)
    assert len(lib) == 12
    for entry in lib.entries[:-1]:
        ref = fit_standardization(fs, entry.subset)
        np.testing.assert_array_equal(entry.adapter.stats.mean, ref.mean)
        np.testing.assert_array_equal(entry.adapter.stats.std, ref.std)


def test_library_deterministic_across_jobs(blobs):
    _, part = ward_cluster(class_centroids(blobs).centroids, 3)
    a = build_library(blobs, part, "square", FAST, jobs=1)
    b = build_library(blobs, part, "square", FAST, jobs=3)
    for x, y in zip(a.entries[:-1], b.entries[:-1]):
        assert np.array_equal(x.adapter.transform, y.adapter.transform)


def test_library_needs_one_base_entry(blobs):
    lib = build_library(blobs, ClassPartition(np.zeros(6, dtype=int), 1), "square", FAST)
    with pytest.raises(ValueError):
        ExtractorLibrary(lib.entries[:1])
    with pytest.raises(ValueError):
        ExtractorLibrary(lib.entries + lib.entries[-1:])


def test_library_build_error_names_entry(blobs, monkeypatch):
    import fewbase.library as library_module

    real = library_module.finetune_two_step

    def flaky(base, subset, mode, cfg):
        if 4 in subset.ids:
            raise FloatingPointError("diverged")
        return real(base, subset, mode, cfg)

    monkeypatch.setattr(library_module, "finetune_two_step", flaky)
    with pytest.raises(LibraryBuildError) as err:
        build_library(blobs, ClassPartition(np.array([0, 0, 0, 1, 1, 1]), 2), "square", FAST)
    assert err.value.index == 1
