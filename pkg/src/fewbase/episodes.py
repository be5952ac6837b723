"""Deterministic few-shot episode sampling.

Per-episode seeds come from ``split_seed(master, i)``, a SplitMix64 step, so
an episode stream is reproducible from its master seed alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .datastore import FeatureSet

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """SplitMix64 finaliser."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def split_seed(master: int, index: int) -> int:
    """Child seed ``mix64(master + (index + 1) * GOLDEN_GAMMA)`` modulo 2**64."""
    return mix64((int(master) + (int(index) + 1) * GOLDEN_GAMMA) & MASK64)


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Episode:
    support_features: np.ndarray
    support_labels: np.ndarray
    query_features: np.ndarray
    query_labels: np.ndarray
    ways: int
    class_map: tuple[int, ...]
    support_indices: np.ndarray
    query_indices: np.ndarray
    seed: int = 0

    @property
    def shots(self) -> np.ndarray:
        return np.bincount(self.support_labels, minlength=self.ways)

    def to_json(self) -> dict:
        return {
            "seed": str(self.seed),
            "ways": self.ways,
            "class_map": list(self.class_map),
            "support_indices": self.support_indices.tolist(),
            "support_labels": self.support_labels.tolist(),
            "query_indices": self.query_indices.tolist(),
            "query_labels": self.query_labels.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict, fs: FeatureSet) -> Episode:
        return _build(
            fs,
            np.asarray(obj["support_indices"], dtype=np.int64),
            np.asarray(obj["support_labels"], dtype=np.int64),
            np.asarray(obj["query_indices"], dtype=np.int64),
            np.asarray(obj["query_labels"], dtype=np.int64),
            tuple(obj["class_map"]),
            int(obj.get("seed", 0)),
        )

    def same_as(self, other: Episode) -> bool:
        return (
            self.class_map == other.class_map
            and np.array_equal(self.support_indices, other.support_indices)
            and np.array_equal(self.query_indices, other.query_indices)
            and np.array_equal(self.support_labels, other.support_labels)
            and np.array_equal(self.query_labels, other.query_labels)
        )


def _build(fs, s_idx, s_lab, q_idx, q_lab, class_map, seed) -> Episode:
    ways = len(class_map)
    if ways < 2:
        raise EpisodeError("an episode needs at least two classes")
    mapping = np.asarray(class_map)
    if not (np.array_equal(fs.labels[s_idx], mapping[s_lab]) and np.array_equal(fs.labels[q_idx], mapping[q_lab])):
        raise EpisodeError("episode labels disagree with class_map")
    if np.intersect1d(s_idx, q_idx).size:
        raise EpisodeError("support and query overlap")
    return Episode(
        fs.features[s_idx],
        s_lab,
        fs.features[q_idx],
        q_lab,
        ways,
        tuple(int(c) for c in class_map),
        s_idx,
        q_idx,
        seed,
    )


def _assemble(fs: FeatureSet, picks: list[tuple[int, np.ndarray, np.ndarray]], seed: int) -> Episode:
    """``picks`` holds (global class, support rows, query rows) per episode class."""
    s_idx = np.concatenate([s for _, s, _ in picks])
    q_idx = np.concatenate([q for _, _, q in picks])
    s_lab = np.concatenate([np.full(len(s), k) for k, (_, s, _) in enumerate(picks)])
    q_lab = np.concatenate([np.full(len(q), k) for k, (_, _, q) in enumerate(picks)])
    return _build(fs, s_idx, s_lab.astype(np.int64), q_idx, q_lab.astype(np.int64), tuple(c for c, _, _ in picks), seed)


def _rows_by_class(fs: FeatureSet) -> list[np.ndarray]:
    order = np.argsort(fs.labels, kind="stable")
    bounds = np.searchsorted(fs.labels[order], np.arange(fs.num_classes + 1))
    return [order[bounds[c] : bounds[c + 1]] for c in range(fs.num_classes)]


def sample_uniform_episode(fs: FeatureSet, ways: int, shots: int, queries_per_class: int, seed: int) -> Episode:
    """N-shot K-way episode with a fixed number of queries per class."""
    if ways > fs.num_classes:
        raise EpisodeError(f"ways={ways} exceeds the {fs.num_classes} classes available")
    if ways < 2 or shots < 1 or queries_per_class < 0:
        raise EpisodeError("need ways >= 2, shots >= 1, queries_per_class >= 0")
    rows = _rows_by_class(fs)
    need = shots + queries_per_class
    eligible = np.array([c for c in range(fs.num_classes) if len(rows[c]) >= need])
    if len(eligible) < ways:
        raise EpisodeError(f"only {len(eligible)} classes have >= {need} examples, need {ways}")
    rng = np.random.default_rng(seed)
    classes = rng.choice(eligible, size=ways, replace=False)
    picks = []
    for c in classes:
        perm = rng.permutation(rows[c])[:need]
        picks.append((int(c), perm[:shots], perm[shots:]))
    return _assemble(fs, picks, seed)


@dataclass(frozen=True)
class MdConfig:
    """Variable-way, variable-shot sampler settings."""

    min_ways: int = 5
    max_ways: int = 50
    max_shots: int = 20
    support_budget: int = 100
    queries_per_class: int = 10


def sample_md_episode(fs: FeatureSet, seed: int, caps: MdConfig = MdConfig()) -> Episode:
    """Simplified Meta-Dataset-style episode.

    Ways are uniform in ``[min_ways, min(max_ways, eligible)]``; each class
    gets ``min(queries, n_c - 1)`` queries and a log-uniform shot count in
    ``[1, max_shots]`` capped by what is left, and total shots are trimmed
    (largest first) to the support budget.
    """
    rows = _rows_by_class(fs)
    eligible = np.array([c for c in range(fs.num_classes) if len(rows[c]) >= 2])
    if len(eligible) < 2:
        raise EpisodeError("fewer than two classes have >= 2 examples")
    rng = np.random.default_rng(seed)
    hi = min(caps.max_ways, len(eligible))
    lo = min(caps.min_ways, hi)
    ways = int(rng.integers(lo, hi + 1))
    classes = rng.choice(eligible, size=ways, replace=False)
    avail = np.array([len(rows[c]) for c in classes])
    queries = np.minimum(caps.queries_per_class, avail - 1)
    u = rng.uniform(0.0, math.log(caps.max_shots + 1), size=ways)
    shots = np.clip(np.floor(np.exp(u)).astype(np.int64), 1, caps.max_shots)
    shots = np.minimum(shots, avail - queries)
    while shots.sum() > caps.support_budget:
        shots[int(np.argmax(shots))] -= 1
    picks = []
    for c, s, q in zip(classes, shots, queries):
        perm = rng.permutation(rows[c])[: s + q]
        picks.append((int(c), perm[:s], perm[s:]))
    return _assemble(fs, picks, seed)


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "uniform"
    ways: int = 5
    shots: int = 5
    queries_per_class: int = 15
    md: MdConfig = MdConfig()

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "md"):
            raise ValueError(f"unknown sampler {self.kind!r}")

    def sample(self, fs: FeatureSet, seed: int) -> Episode:
        if self.kind == "md":
            return sample_md_episode(fs, seed, self.md)
        return sample_uniform_episode(fs, self.ways, self.shots, self.queries_per_class, seed)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "md":
            out.update(self.md.__dict__)
        else:
            out.update(ways=self.ways, shots=self.shots, queries_per_class=self.queries_per_class)
        return out


DEFAULT_EPISODES = 600


def episode_stream(
    fs: FeatureSet, master_seed: int, count: int = DEFAULT_EPISODES, sampler: SamplerSpec = SamplerSpec()
) -> list[Episode]:
    if count < 1:
        raise EpisodeError("count must be >= 1")
    return [sampler.sample(fs, split_seed(master_seed, i)) for i in range(count)]


def save_episodes(episodes: Iterable[Episode], path: str | Path, meta: dict | None = None) -> None:
    payload = {"meta": meta or {}, "episodes": [ep.to_json() for ep in episodes]}
    Path(path).write_text(json.dumps(payload))


def load_episodes(path: str | Path, fs: FeatureSet) -> list[Episode]:
    payload = json.loads(Path(path).read_text())
    return [Episode.from_json(obj, fs) for obj in payload["episodes"]]
