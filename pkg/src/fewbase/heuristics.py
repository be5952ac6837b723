"""Support-set heuristics for choosing a library entry per few-shot task.

Every scoring function takes support features already passed through the
candidate entry's adapter, with episode-local labels ``0..ways-1``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import apply_adapter
from .classifiers import LinearHead, fit_logistic_regression, fit_ncm, ncm_accuracy, predict_ncm, predict_softmax
from .datastore import FeatureSet
from .episodes import Episode, split_seed
from .library import ClassPartition, ExtractorLibrary
from .training import TrainConfig, softmax, subsample_rows

log = logging.getLogger(__name__)

KINDS = ("SSA", "SSC", "LOO", "SNR", "MCS", "RKM", "FIM", "AA", "RH", "ORACLE")
DEFAULT_PARAMS: dict[str, dict] = {
    "SSC": {"T": 1.0},
    "LOO": {"reps": 30, "seed": 0},
    "MCS": {"samples": 100, "shrinkage": 0.3, "seed": 0},
    "RKM": {"eps": 1e-7},
    "FIM": {"cluster_rows": 2000},
    "RH": {"seed": 0},
}
LOO_EXHAUSTIVE_MAX = 256
FIM_PROBE = TrainConfig(optimizer="adam", learning_rate=1e-2, epochs=50, batch_size=100_000)


class HeuristicInapplicable(ValueError):
    pass


def _class_groups(x: np.ndarray, y: np.ndarray, ways: int) -> list[np.ndarray]:
    return [x[y == k] for k in range(ways)]


def h_ssa(x: np.ndarray, y: np.ndarray, ways: int) -> float:
    """Resubstitution NCM accuracy: the support set is also the query set."""
    return ncm_accuracy(x, y, x, y, ways)


def h_ssc(x: np.ndarray, y: np.ndarray, ways: int, T: float = 1.0) -> float:
    """Mean over support points of the largest softmax(-distance / T) over centroids."""
    if T <= 0:
        raise ValueError("temperature must be > 0")
    _, dist = predict_ncm(fit_ncm(x, y, ways), x)
    return float(softmax(-dist / T).max(axis=1).mean())


def loo_combinations(shots: np.ndarray) -> int:
    return math.prod(int(s) for s in shots)


def h_loo(x: np.ndarray, y: np.ndarray, ways: int, reps: int = 30, seed: int = 0) -> float:
    """Hold out one support sample per class, classify the held-out points.

    All hold-out combinations are enumerated when there are at most 256 of
    them; otherwise ``reps`` combinations are drawn with ``seed``.
    """
    groups = [np.flatnonzero(y == k) for k in range(ways)]
    shots = np.array([len(g) for g in groups])
    if (shots < 2).any():
        raise HeuristicInapplicable("LOO needs at least two shots in every class")
    if loo_combinations(shots) <= LOO_EXHAUSTIVE_MAX:
        combos = list(itertools.product(*groups))
    else:
        rng = np.random.default_rng(seed)
        combos = [tuple(int(rng.choice(g)) for g in groups) for _ in range(reps)]
    labels = np.arange(ways)
    total = 0.0
    for held in combos:
        held = np.asarray(held)
        keep = np.ones(len(y), dtype=bool)
        keep[held] = False
        pred, _ = predict_ncm(fit_ncm(x[keep], y[keep], ways), x[held])
        total += float(np.mean(pred == labels))
    return total / len(combos)


def _class_std(group: np.ndarray) -> float:
    """Root mean squared distance to the class mean (n - 1 denominator)."""
    if len(group) < 2:
        return 0.0
    dev = group - group.mean(axis=0)
    return float(np.sqrt(np.sum(dev * dev) / (len(group) - 1)))


def h_snr(x: np.ndarray, y: np.ndarray, ways: int) -> float:
    """Mean over class pairs of ``2 |mu_i - mu_j| / (sigma_i + sigma_j)``.

    With every class at one shot, only the mean pairwise centroid distance
    is used. In mixed episodes, single-shot classes borrow the mean spread of
    the multi-shot classes.
    """
    groups = _class_groups(x, y, ways)
    means = np.array([g.mean(axis=0) for g in groups])
    multi = [_class_std(g) for g in groups if len(g) >= 2]
    pairs = list(itertools.combinations(range(ways), 2))
    if not multi:
        return float(np.mean([np.linalg.norm(means[i] - means[j]) for i, j in pairs]))
    fallback = float(np.mean(multi))
    sigma = [_class_std(g) if len(g) >= 2 else fallback for g in groups]
    vals = []
    for i, j in pairs:
        delta = float(np.linalg.norm(means[i] - means[j]))
        noise = sigma[i] + sigma[j]
        vals.append(0.0 if noise == 0 and delta == 0 else (math.inf if noise == 0 else 2 * delta / noise))
    return float(np.mean(vals))


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


def h_mcs(
    x: np.ndarray, y: np.ndarray, ways: int, samples: int = 100, shrinkage: float = 0.3, seed: int = 0
) -> float:
    """NCM accuracy on virtual points drawn from per-class Gaussians.

    Covariances are shrunk towards a scaled identity,
    ``(1 - a) S + a (tr S / d) I``; single-shot classes use an isotropic
    variance ``(mean pairwise centroid distance)^2 / d``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    groups = _class_groups(x, y, ways)
    means = np.array([g.mean(axis=0) for g in groups])
    iso = None
    rng = np.random.default_rng(seed)
    virtual, labels = [], []
    for k, g in enumerate(groups):
        if len(g) >= 2:
            cov = np.cov(g, rowvar=False, bias=True).reshape(d, d)
            cov = (1 - shrinkage) * cov + shrinkage * (np.trace(cov) / d) * np.eye(d)
            root = _psd_sqrt(cov)
        else:
            if iso is None:
                dists = [np.linalg.norm(means[i] - means[j]) for i, j in itertools.combinations(range(ways), 2)]
                iso = (float(np.mean(dists)) ** 2 / d) if dists else 0.0
            root = math.sqrt(iso) * np.eye(d)
        virtual.append(means[k] + rng.standard_normal((samples, d)) @ root.T)
        labels.append(np.full(samples, k))
    pred, _ = predict_ncm(fit_ncm(x, y, ways), np.concatenate(virtual))
    return float(np.mean(pred == np.concatenate(labels)))


def h_rkm(x: np.ndarray, eps: float = 1e-7) -> float:
    """Smooth rank: exp of the entropy of the normalised singular values."""
    x = np.asarray(x, dtype=np.float64)
    if not np.any(x):
        raise ValueError("smooth rank of an all-zero matrix is undefined")
    s = np.linalg.svd(x, compute_uv=False) + eps
    p = s / s.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def fim_diagonal(head: LinearHead, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal Fisher information of a linear softmax probe.

    With labels drawn from the model, ``E_y[(1[y=c] - p_c)^2] = p_c (1 - p_c)``,
    so the weight entry ``(c, j)`` is ``mean_x p_c (1 - p_c) x_j^2`` and the
    bias entry is ``mean_x p_c (1 - p_c)``.
    """
    x = np.asarray(x, dtype=np.float64)
    p = predict_softmax(head, x)
    v = p * (1 - p)
    return v.T @ (x * x) / len(x), v.mean(axis=0)


def fim_embedding(x: np.ndarray, y: np.ndarray, ways: int, probe: TrainConfig = FIM_PROBE) -> np.ndarray:
    """Unit-norm FIM diagonal of a probe fit on ``(x, y)``, summed over classes.

    Summing over the class axis gives a length ``d + 1`` vector, so tasks
    with different class counts share one embedding space.
    """
    if ways < 2:
        raise HeuristicInapplicable("FIM probe needs at least two classes")
    head = fit_logistic_regression(x, y, probe, ways)
    w_diag, b_diag = fim_diagonal(head, x)
    emb = np.concatenate([w_diag.sum(axis=0), [b_diag.sum()]])
    norm = np.linalg.norm(emb)
    return emb / norm if norm > 0 else emb


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


def h_fim(
    x: np.ndarray, y: np.ndarray, ways: int, cluster_embedding: np.ndarray, probe: TrainConfig = FIM_PROBE
) -> float:
    """Negated cosine distance between support and cluster FIM embeddings."""
    return -cosine_distance(fim_embedding(x, y, ways, probe), cluster_embedding)


def cluster_mass(support: np.ndarray, base_head: LinearHead, partition: ClassPartition) -> np.ndarray:
    p = predict_softmax(base_head, support).sum(axis=0)
    return np.bincount(partition.assignment, weights=p, minlength=partition.n_clusters)


def h_aa_cluster(support: np.ndarray, base_head: LinearHead, partition: ClassPartition) -> int:
    """Cluster with the largest summed base-class activation over the support."""
    if len(partition.assignment) != base_head.num_classes:
        raise ValueError("partition must cover every base class")
    return int(np.argmax(cluster_mass(support, base_head, partition)))


@dataclass(frozen=True)
class HeuristicKind:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        name = self.name.upper()
        if name not in KINDS:
            raise ValueError(f"unknown heuristic {self.name!r}; choose from {', '.join(KINDS)}")
        merged = {**DEFAULT_PARAMS.get(name, {}), **self.params}
        for key, value in merged.items():
            if key != "seed" and value <= 0:
                raise ValueError(f"{name} parameter {key} must be positive")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "params", merged)

    @classmethod
    def parse(cls, text: str) -> HeuristicKind:
        """``"ssc"`` or ``"ssc:T=0.5"`` or ``"mcs:samples=200,shrinkage=0.1"``."""
        name, _, rest = text.partition(":")
        params = {}
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            params[key.strip()] = float(value) if "." in value or "e" in value else int(value)
        return cls(name.strip(), params)

    @property
    def label(self) -> str:
        return self.name

    def needs_multishot(self) -> bool:
        return self.name in ("SSA", "SSC", "MCS", "RKM")


@dataclass(eq=False)
class HeuristicReport:
    kind: str
    scores: list[float]
    selected: int
    entry_accuracies: list[float]
    fallback: bool = False
    warning: str = ""

    @property
    def accuracy(self) -> float:
        return self.entry_accuracies[self.selected]


class SelectionContext:
    """Per-episode cache of adapted features and per-entry query accuracy."""

    def __init__(self, episode: Episode, library: ExtractorLibrary, base: FeatureSet | None = None) -> None:
        self.episode = episode
        self.library = library
        self.base = base
        self._support: dict[int, np.ndarray] = {}
        self._acc: dict[int, float] = {}

    def support(self, i: int) -> np.ndarray:
        if i not in self._support:
            self._support[i] = apply_adapter(self.library.entries[i].adapter, self.episode.support_features)
        return self._support[i]

    def query_accuracy(self, i: int) -> float:
        if i not in self._acc:
            ep = self.episode
            q = apply_adapter(self.library.entries[i].adapter, ep.query_features)
            self._acc[i] = ncm_accuracy(self.support(i), ep.support_labels, q, ep.query_labels, ep.ways)
        return self._acc[i]

    def accuracies(self) -> list[float]:
        return [self.query_accuracy(i) for i in range(len(self.library))]


def cluster_embedding(library: ExtractorLibrary, index: int, base: FeatureSet, rows: int = 2000) -> np.ndarray:
    """FIM embedding of an entry's own classes as seen through its adapter.

    Cached on the library; the cached value pins ``base`` so its id stays valid.
    """
    cache = library.__dict__.setdefault("_fim_cache", {})
    key = (id(base), index, rows)
    if key not in cache:
        entry = library.entries[index]
        ids = np.asarray(entry.subset.ids)
        sel = base.subset_rows(ids)
        sel = sel[subsample_rows(len(sel), rows, index)]
        local = np.full(base.num_classes, -1)
        local[ids] = np.arange(len(ids))
        x = apply_adapter(entry.adapter, base.features[sel].astype(np.float64))
        cache[key] = (base, fim_embedding(x, local[base.labels[sel]], len(ids)))
    return cache[key][1]


def applicable(kind: HeuristicKind, episode: Episode) -> str:
    """Empty string when ``kind`` applies to ``episode``, else the reason."""
    shots = episode.shots
    if kind.name == "LOO" and (shots < 2).any():
        return "LOO needs two shots in every class"
    if kind.needs_multishot() and (shots < 2).all():
        return f"{kind.name} is degenerate in the one-shot setting"
    return ""


def _argmax(scores: list[float]) -> int:
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def score_entry(kind: HeuristicKind, ctx: SelectionContext, index: int) -> float:
    ep = ctx.episode
    x, y, ways = ctx.support(index), ep.support_labels, ep.ways
    p = kind.params
    if kind.name == "SSA":
        return h_ssa(x, y, ways)
    if kind.name == "SSC":
        return h_ssc(x, y, ways, p["T"])
    if kind.name == "LOO":
        return h_loo(x, y, ways, int(p["reps"]), split_seed(p["seed"], ep.seed))
    if kind.name == "SNR":
        return h_snr(x, y, ways)
    if kind.name == "MCS":
        return h_mcs(x, y, ways, int(p["samples"]), p["shrinkage"], split_seed(p["seed"], ep.seed))
    if kind.name == "RKM":
        return h_rkm(x, p["eps"])
    if kind.name == "FIM":
        if ctx.base is None:
            raise ValueError("FIM needs the base feature set")
        emb = cluster_embedding(ctx.library, index, ctx.base, int(p["cluster_rows"]))
        return h_fim(x, y, ways, emb)
    raise ValueError(f"{kind.name} does not score entries individually")


def select_extractor(
    kind: HeuristicKind,
    episode: Episode,
    library: ExtractorLibrary,
    base: FeatureSet | None = None,
    ctx: SelectionContext | None = None,
) -> HeuristicReport:
    """Score every library entry on the support set and pick the best one.

    Ties go to the lower entry index. ``AA`` scores cluster entries by summed
    base activations (the base entry is never chosen by AA), ``RH`` picks
    uniformly with a seed derived from the episode, and ``ORACLE`` peeks at
    query accuracy (evaluation only). Inapplicable heuristics fall back to
    the base entry and set ``fallback``.
    """
    ctx = ctx or SelectionContext(episode, library, base)
    n = len(library)
    accs = ctx.accuracies()
    if n == 1:
        return HeuristicReport(kind.name, [0.0], 0, accs)
    reason = applicable(kind, episode)
    if reason:
        log.debug("episode %s: %s; falling back to base entry", episode.seed, reason)
        return HeuristicReport(kind.name, [math.nan] * n, library.base_index, accs, True, reason)
    if kind.name == "ORACLE":
        return HeuristicReport(kind.name, list(accs), _argmax(accs), accs)
    if kind.name == "RH":
        rng = np.random.default_rng(split_seed(kind.params["seed"], episode.seed))
        pick = int(rng.integers(n))
        return HeuristicReport(kind.name, [math.nan] * n, pick, accs)
    if kind.name == "AA":
        if library.partition is None:
            raise ValueError("AA needs a library built from a partition")
        mass = cluster_mass(episode.support_features, library.base_head, library.partition)
        scores = [-math.inf if e.is_base else float(mass[e.cluster]) for e in library.entries]
        return HeuristicReport(kind.name, scores, _argmax(scores), accs)
    try:
        scores = [score_entry(kind, ctx, i) for i in range(n)]
    except HeuristicInapplicable as exc:
        return HeuristicReport(kind.name, [math.nan] * n, library.base_index, accs, True, str(exc))
    return HeuristicReport(kind.name, scores, _argmax(scores), accs)
