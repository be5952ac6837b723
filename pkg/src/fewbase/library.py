"""Static libraries of specialist adapters built from base-class clusters."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import IDENTITY, AdapterModel, FinetuneConfig, finetune_two_step
from .classifiers import LinearHead, fit_linear_head
from .datastore import CentroidTable, FeatureSet
from .episodes import split_seed
from .selection import ClassSubset

REPRESENTATIONS = ("V", "Se", "X", "R")
DEFAULT_CLUSTERS = 11
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    distance: float
    size: int


@dataclass(eq=False)
class Dendrogram:
    merges: list[Merge]
    n_leaves: int

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "left", "right", "distance", "size"])
            for step, m in enumerate(self.merges):
                writer.writerow([step, m.left, m.right, repr(m.distance), m.size])

    def as_linkage(self) -> np.ndarray:
        """SciPy-style ``(C-1) x 4`` linkage matrix."""
        return np.array([[m.left, m.right, m.distance, m.size] for m in self.merges], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class ClassPartition:
    assignment: np.ndarray
    n_clusters: int
    representation: str = "V"

    def __post_init__(self) -> None:
        sizes = np.bincount(self.assignment, minlength=self.n_clusters)
        if len(sizes) != self.n_clusters or (sizes == 0).any():
            raise ValueError("every cluster must be nonempty and ids must lie in [0, L)")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")

    def members(self, cluster: int) -> tuple[int, ...]:
        return tuple(np.flatnonzero(self.assignment == cluster).tolist())

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clusters)

    def to_json(self) -> dict:
        return {"representation": self.representation, "L": self.n_clusters, "assignment": self.assignment.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> ClassPartition:
        return cls(np.asarray(obj["assignment"], dtype=np.int64), int(obj["L"]), obj.get("representation", "V"))


def _normalize_center(block: np.ndarray) -> np.ndarray:
    block = np.asarray(block, dtype=np.float64)
    block = block / np.maximum(np.linalg.norm(block, axis=1, keepdims=True), 1e-12)
    return block - block.mean(axis=0)


def build_class_representation(
    mode: str, centroids: CentroidTable, semantic: np.ndarray | None = None
) -> np.ndarray | None:
    """Per-class vectors used for clustering; ``None`` for the random mode.

    ``X`` normalises each block row-wise, centres its columns, then
    concatenates visual and semantic blocks.
    """
    if mode not in REPRESENTATIONS:
        raise ValueError(f"unknown representation {mode!r}")
    if mode == "R":
        return None
    if mode == "V":
        return centroids.centroids
    if semantic is None:
        raise ValueError(f"representation {mode} requires semantic vectors")
    semantic = np.asarray(semantic, dtype=np.float64)
    if semantic.shape[0] != centroids.centroids.shape[0]:
        raise ValueError("semantic table must have one row per class")
    if mode == "Se":
        return semantic
    return np.hstack([_normalize_center(centroids.centroids), _normalize_center(semantic)])


def ward_linkage(points: np.ndarray) -> Dendrogram:
    """Agglomerative Ward clustering with Lance-Williams updates.

    Works on squared merge costs; reported distances are their square roots
    (SciPy's convention). Node ``n + k`` is created by merge ``k``. Ties
    (relative tolerance ``TIE_RTOL``) go to the lexicographically smallest
    (node, node) pair.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if n < 1:
        raise ValueError("need at least one point")
    d2 = np.empty((n, n))
    for i in range(n):
        diff = x[i + 1 :] - x[i]
        d2[i, i + 1 :] = d2[i + 1 :, i] = np.einsum("ij,ij->i", diff, diff)
    np.fill_diagonal(d2, np.inf)
    node = np.arange(n)
    size = np.ones(n)
    merges: list[Merge] = []
    # retired slots are filled with inf so they never win a merge
    for step in range(n - 1):
        best = d2.min()
        # costs within TIE_RTOL of the minimum count as ties (rounding in the updates)
        cand = np.argwhere(d2 <= best + abs(best) * TIE_RTOL)
        pairs = sorted((min(node[i], node[j]), max(node[i], node[j]), i, j) for i, j in cand)
        a_node, b_node, i, j = pairs[0]
        best = d2[i, j]
        ni, nj = size[i], size[j]
        nk = size
        updated = ((nk + ni) * d2[i] + (nk + nj) * d2[j] - nk * d2[i, j]) / (nk + ni + nj)
        d2[i, :] = updated
        d2[:, i] = updated
        d2[i, i] = np.inf
        d2[j, :] = np.inf
        d2[:, j] = np.inf
        size[i] = ni + nj
        node[i] = n + step
        merges.append(Merge(int(a_node), int(b_node), float(np.sqrt(max(best, 0.0))), int(ni + nj)))
    return Dendrogram(merges, n)


def cut_dendrogram(dendrogram: Dendrogram, n_clusters: int) -> np.ndarray:
    """Cluster ids after applying the first ``C - L`` merges.

    Clusters are numbered by their smallest member.
    """
    n = dendrogram.n_leaves
    if not 1 <= n_clusters <= n:
        raise ValueError(f"cluster count {n_clusters} outside [1, {n}]")
    parent = list(range(2 * n - 1))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for step, m in enumerate(dendrogram.merges[: n - n_clusters]):
        parent[find(m.left)] = n + step
        parent[find(m.right)] = n + step
    roots = [find(i) for i in range(n)]
    relabel: dict[int, int] = {}
    for r in roots:
        relabel.setdefault(r, len(relabel))
    return np.array([relabel[r] for r in roots], dtype=np.int64)


def ward_cluster(
    representation: np.ndarray, n_clusters: int = DEFAULT_CLUSTERS, tag: str = "V"
) -> tuple[Dendrogram, ClassPartition]:
    dendrogram = ward_linkage(representation)
    return dendrogram, ClassPartition(cut_dendrogram(dendrogram, n_clusters), n_clusters, tag)


def random_partition(n_classes: int, n_clusters: int = DEFAULT_CLUSTERS, seed: int = 0) -> ClassPartition:
    """Uniform random assignment, redrawn until every cluster is nonempty.

    After 1000 rejected draws one random class is pinned to each cluster
    and the rest stay uniform; ``L == C`` is a random bijection.
    """
    if not 1 <= n_clusters <= n_classes:
        raise ValueError(f"need 1 <= L <= C, got L={n_clusters}, C={n_classes}")
    rng = np.random.default_rng([seed, 0x4A2])
    if n_clusters == n_classes:
        return ClassPartition(rng.permutation(n_classes), n_clusters, "R")
    for _ in range(1000):
        assignment = rng.integers(0, n_clusters, n_classes)
        if np.bincount(assignment, minlength=n_clusters).min() > 0:
            return ClassPartition(assignment, n_clusters, "R")
    assignment = rng.integers(0, n_clusters, n_classes)
    pinned = rng.choice(n_classes, size=n_clusters, replace=False)
    assignment[pinned] = np.arange(n_clusters)
    return ClassPartition(assignment, n_clusters, "R")


@dataclass(eq=False)
class LibraryEntry:
    subset: ClassSubset
    adapter: AdapterModel
    head: LinearHead
    name: str
    cluster: int | None = None

    @property
    def is_base(self) -> bool:
        return self.cluster is None


@dataclass(eq=False)
class ExtractorLibrary:
    entries: list[LibraryEntry]
    partition: ClassPartition | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("a library needs at least one entry")
        if sum(e.is_base for e in self.entries) != 1:
            raise ValueError("exactly one base entry is required")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def base_index(self) -> int:
        return next(i for i, e in enumerate(self.entries) if e.is_base)

    @property
    def base_head(self) -> LinearHead:
        return self.entries[self.base_index].head

    def save(self, directory: str | Path) -> Path:
        """Write one JSON file per entry plus ``library.json`` listing them."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        listing = []
        for i, entry in enumerate(self.entries):
            fname = f"entry_{i:03d}.json"
            payload = {
                "name": entry.name,
                "cluster": entry.cluster,
                "subset": entry.subset.to_json(),
                "adapter": entry.adapter.to_json(),
                "head": entry.head.to_json(),
            }
            (out / fname).write_text(json.dumps(payload))
            listing.append(fname)
        manifest = {
            "entries": listing,
            "partition": self.partition.to_json() if self.partition is not None else None,
            "meta": self.meta,
        }
        path = out / "library.json"
        path.write_text(json.dumps(manifest, indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> ExtractorLibrary:
        path = Path(path)
        if path.is_dir():
            path = path / "library.json"
        manifest = json.loads(path.read_text())
        entries = []
        for fname in manifest["entries"]:
            obj = json.loads((path.parent / fname).read_text())
            entries.append(
                LibraryEntry(
                    ClassSubset.from_json(obj["subset"]),
                    AdapterModel.from_json(obj["adapter"]),
                    LinearHead.from_json(obj["head"]),
                    obj["name"],
                    obj["cluster"],
                )
            )
        partition = manifest.get("partition")
        return cls(
            entries,
            ClassPartition.from_json(partition) if partition else None,
            manifest.get("meta", {}),
        )


class LibraryBuildError(RuntimeError):
    def __init__(self, index: int, cause: BaseException) -> None:
        super().__init__(f"library entry {index} failed: {cause}")
        self.index = index


def build_library(
    base: FeatureSet,
    partition: ClassPartition,
    mode: str = "square_residual",
    config: FinetuneConfig = FinetuneConfig(),
    base_head: LinearHead | None = None,
    jobs: int = 1,
) -> ExtractorLibrary:
    """Fine-tune one adapter per cluster and append the untouched base model.

    Entry ``j`` uses seed ``split_seed(config.seed, j)``; results are ordered
    by cluster id whatever the completion order.
    """

    def job(cluster: int) -> LibraryEntry:
        subset = ClassSubset(partition.members(cluster), method=f"cluster{partition.representation}")
        cfg = config.with_(seed=split_seed(config.seed, cluster) & 0x7FFFFFFF)
        try:
            adapter, head = finetune_two_step(base, subset, mode, cfg)
        except Exception as exc:
            raise LibraryBuildError(cluster, exc) from exc
        return LibraryEntry(subset, adapter, head, f"{partition.representation}{cluster}", cluster)

    clusters = range(partition.n_clusters)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(job, clusters))
    else:
        entries = [job(c) for c in clusters]
    if base_head is None:
        base_head = fit_linear_head(base)
    all_classes = ClassSubset(tuple(range(base.num_classes)), method="base")
    entries.append(LibraryEntry(all_classes, IDENTITY, base_head, "base", None))
    meta = {"mode": mode, "finetune": config.to_dict(), "representation": partition.representation}
    return ExtractorLibrary(entries, partition, meta)
