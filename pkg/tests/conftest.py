from __future__ import annotations

import numpy as np
import pytest

from fewbase.datastore import FeatureSet, synthetic_class_names
from fewbase.synthbench import UniverseConfig, generate_universe


def make_blobs(n_classes: int, per_class: int, d: int, seed: int = 0, spread: float = 3.0, split: str = "train"):
    rng = np.random.default_rng(seed)
    means = spread * rng.standard_normal((n_classes, d))
    y = np.repeat(np.arange(n_classes), per_class)
    x = means[y] + rng.standard_normal((len(y), d))
    return FeatureSet(x.astype(np.float32), y, synthetic_class_names(n_classes), split)


@pytest.fixture
def blobs():
    return make_blobs(6, 20, 5, seed=1)


@pytest.fixture(scope="session")
def universe():
    return generate_universe(UniverseConfig())


@pytest.fixture(scope="session")
def aligned_library(universe):
    """Specialist per latent domain (X representation) plus the base entry."""
    from fewbase.adapters import FinetuneConfig
    from fewbase.datastore import class_centroids
    from fewbase.library import build_class_representation, build_library, ward_cluster

    rep = build_class_representation("X", class_centroids(universe.base), universe.semantic)
    _, part = ward_cluster(rep, universe.config.latent_domains, "X")
    return build_library(universe.base, part, "square_residual", FinetuneConfig(seed=0), jobs=4)


@pytest.fixture(scope="session")
def base_head(universe):
    from fewbase.classifiers import fit_linear_head

    return fit_linear_head(universe.base)
