"""Synthetic base/target feature universes with known relevant classes.

Generative recipe:

* A random orthonormal basis of R^d is cut into ``latent_domains`` blocks of
  ``domain_rank`` directions; the leftover directions form a free subspace
  used by unaligned targets.
* Domain means lie on a sphere of radius ``separation``.
* A base class mean is its domain mean plus a Gaussian offset of scale
  ``class_spread`` inside the domain's block. Examples add isotropic noise
  of scale ``within_sigma`` in all d dimensions.
* Each base class gets a "semantic" vector: a random per-domain prototype
  plus Gaussian noise of scale ``semantic_noise`` (a stand-in for text
  embeddings of class names, which carry domain structure).
* Target classes are new classes drawn the same way, mixing the aligned
  domain(s) with weight ``alignment`` and the free subspace (around its own
  mean) with weight ``1 - alignment``. The target test split and the
  unlabeled domain pool (validation split) use disjoint target classes.

Classes of the aligned domain(s) are the ground-truth relevant subset.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datastore import FeatureSet, save_feature_set, synthetic_class_names
from .selection import ClassSubset


@dataclass(frozen=True)
class UniverseConfig:
    d: int = 32
    latent_domains: int = 8
    classes_per_domain: int = 8
    examples_per_class: int = 200
    domain_rank: int = 3
    within_sigma: float = 1.0
    separation: float = 6.0
    class_spread: float = 1.5
    aligned_domains: tuple[int, ...] = (0,)
    alignment: float = 1.0
    target_classes: int = 20
    target_examples_per_class: int = 60
    pool_classes: int = 20
    pool_examples_per_class: int = 30
    semantic_dim: int = 16
    semantic_noise: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.separation <= 0:
            raise ValueError("separation must be > 0")
        counts = (
            self.d,
            self.latent_domains,
            self.classes_per_domain,
            self.examples_per_class,
            self.domain_rank,
            self.target_classes,
            self.target_examples_per_class,
            self.pool_classes,
            self.pool_examples_per_class,
            self.semantic_dim,
        )
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        if self.semantic_noise < 0:
            raise ValueError("semantic_noise must be >= 0")
        if not 0.0 <= self.alignment <= 1.0:
            raise ValueError("alignment must lie in [0, 1]")
        if any(not 0 <= g < self.latent_domains for g in self.aligned_domains):
            raise ValueError("aligned domain out of range")
        if self.latent_domains * self.domain_rank > self.d:
            raise ValueError("latent_domains * domain_rank must not exceed d")

    @classmethod
    def from_dict(cls, obj: dict) -> UniverseConfig:
        obj = dict(obj)
        if "aligned_domains" in obj:
            obj["aligned_domains"] = tuple(obj["aligned_domains"])
        return cls(**obj)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["aligned_domains"] = list(self.aligned_domains)
        return out


@dataclass(eq=False)
class Universe:
    base: FeatureSet
    target: FeatureSet
    truth: ClassSubset
    pool: FeatureSet
    domain_of_class: np.ndarray
    semantic: np.ndarray
    config: UniverseConfig = field(default_factory=UniverseConfig)

    def __iter__(self):
        # unpacks as (base, target, truth)
        return iter((self.base, self.target, self.truth))


def generate_universe(config: UniverseConfig = UniverseConfig()) -> Universe:
    cfg = config
    rng = np.random.default_rng([cfg.seed, 0x5B])
    basis, _ = np.linalg.qr(rng.standard_normal((cfg.d, cfg.d)))
    blocks = [basis[:, g * cfg.domain_rank : (g + 1) * cfg.domain_rank] for g in range(cfg.latent_domains)]
    free = basis[:, cfg.latent_domains * cfg.domain_rank :]
    if free.shape[1] == 0:
        free = blocks[-1]

    def on_sphere(n: int, radius: float, span: np.ndarray | None = None) -> np.ndarray:
        if span is None:
            v = rng.standard_normal((n, cfg.d))
        else:
            v = rng.standard_normal((n, span.shape[1])) @ span.T
        return radius * v / np.linalg.norm(v, axis=1, keepdims=True)

    domain_means = on_sphere(cfg.latent_domains, cfg.separation)
    free_mean = on_sphere(1, cfg.separation, free)[0]

    def class_means(n: int, mean: np.ndarray, block: np.ndarray) -> np.ndarray:
        return mean + cfg.class_spread * rng.standard_normal((n, block.shape[1])) @ block.T

    def sample(means: np.ndarray, per_class: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.repeat(np.arange(len(means)), per_class)
        x = means[labels] + cfg.within_sigma * rng.standard_normal((len(labels), cfg.d))
        return x.astype(np.float32), labels

    base_means = np.concatenate(
        [class_means(cfg.classes_per_domain, domain_means[g], blocks[g]) for g in range(cfg.latent_domains)]
    )
    domain_of_class = np.repeat(np.arange(cfg.latent_domains), cfg.classes_per_domain)
    x, y = sample(base_means, cfg.examples_per_class)
    base = FeatureSet(x, y, synthetic_class_names(len(base_means), "base"), "train")

    def target_means(n: int) -> np.ndarray:
        which = rng.choice(np.asarray(cfg.aligned_domains), size=n)
        aligned = np.stack([class_means(1, domain_means[g], blocks[g])[0] for g in which])
        unaligned = class_means(n, free_mean, free)
        return cfg.alignment * aligned + (1.0 - cfg.alignment) * unaligned

    x, y = sample(target_means(cfg.target_classes), cfg.target_examples_per_class)
    target = FeatureSet(x, y, synthetic_class_names(cfg.target_classes, "target"), "test")
    x, y = sample(target_means(cfg.pool_classes), cfg.pool_examples_per_class)
    pool = FeatureSet(x, y, synthetic_class_names(cfg.pool_classes, "pool"), "validation")

    # separate stream so semantic settings never perturb the features
    srng = np.random.default_rng([cfg.seed, 0x5E])
    prototypes = srng.standard_normal((cfg.latent_domains, cfg.semantic_dim))
    semantic = prototypes[domain_of_class] + cfg.semantic_noise * srng.standard_normal(
        (len(domain_of_class), cfg.semantic_dim)
    )

    relevant = np.flatnonzero(np.isin(domain_of_class, cfg.aligned_domains))
    truth = ClassSubset(tuple(int(c) for c in relevant), tuple(1.0 for _ in relevant), "truth")
    return Universe(base, target, truth, pool, domain_of_class, semantic, cfg)


def selection_precision_recall(selected: ClassSubset, truth: ClassSubset) -> tuple[float, float]:
    sel, ref = set(selected.ids), set(truth.ids)
    if not sel or not ref:
        raise ValueError("both subsets must be nonempty")
    hit = len(sel & ref)
    return hit / len(sel), hit / len(ref)


def write_universe(universe: Universe, out_dir: str | Path) -> dict[str, Path]:
    """Write base/target/pool FFS files, semantic vectors, truth JSON and a manifest into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": out / "base.ffs",
        "test": out / "target.ffs",
        "validation": out / "pool.ffs",
    }
    save_feature_set(universe.base, paths["train"])
    save_feature_set(universe.target, paths["test"])
    save_feature_set(universe.pool, paths["validation"])
    names = universe.base.class_names
    semantic = FeatureSet(universe.semantic.astype(np.float32), np.arange(len(names), dtype=np.int32), names, "train")
    save_feature_set(semantic, out / "semantic.ffs")
    truth_path = out / "truth.json"
    truth_path.write_text(json.dumps(universe.truth.to_json()))
    (out / "manifest.json").write_text(json.dumps({k: p.name for k, p in paths.items()}, indent=2))
    (out / "config.json").write_text(json.dumps(universe.config.to_dict(), indent=2))
    paths["semantic"] = out / "semantic.ffs"
    paths["truth"] = truth_path
    paths["manifest"] = out / "manifest.json"
    return paths
