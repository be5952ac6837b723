"""End-to-end workflows: baseline, S, TI, DI (and their UOT variants), UI.

Exit codes returned by :func:`run_workflow`:

* 0: every episode evaluated for every method
* 2: invalid configuration
* 3: finished, but some episodes failed (listed in the summary)
"""

from __future__ import annotations

import csv
import io
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .adapters import AdapterModel, FinetuneConfig, apply_adapter, finetune_on_support, finetune_two_step
from .classifiers import LinearHead, fit_linear_head, logreg_accuracy, ncm_accuracy
from .datastore import FeatureSet, class_centroids, l2_normalize, load_feature_set, load_manifest
from .episodes import DEFAULT_EPISODES, Episode, MdConfig, SamplerSpec, episode_stream, load_episodes, split_seed
from .evaluation import PairedResult, episode_csv, run_paired_comparison, summary_json
from .heuristics import HeuristicKind, SelectionContext, select_extractor
from .library import ExtractorLibrary
from .selection import DEFAULT_M, ClassSubset, UotParams, select_aa, select_uot

log = logging.getLogger(__name__)

WORKFLOWS = ("baseline", "S", "TI", "DI", "UI", "TI-UOT", "DI-UOT")
EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3


class ConfigError(ValueError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class RunConfig:
    manifest: str | None = None
    workflow: str = "baseline"
    methods: list[str] = field(default_factory=list)
    sampler: SamplerSpec = SamplerSpec()
    episodes: int = DEFAULT_EPISODES
    episodes_file: str | None = None
    master_seed: int = 0
    m: int = DEFAULT_M
    mode: str = "square_residual"
    finetune: FinetuneConfig = FinetuneConfig()
    uot: UotParams = UotParams()
    heuristics: list[str] = field(default_factory=lambda: ["SSA"])
    library: str | None = None
    base_head: str | None = None
    classifier: str = "ncm"
    l2_normalize: bool = False
    support_frozen: bool = False
    out_dir: str = "out"
    jobs: int = 1
    reuse_cache: bool = True

    def resolved_methods(self) -> list[str]:
        return list(self.methods) if self.methods else [self.workflow]

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest,
            "workflow": self.workflow,
            "methods": self.resolved_methods(),
            "sampler": self.sampler.to_dict(),
            "episodes": self.episodes,
            "episodes_file": self.episodes_file,
            "master_seed": self.master_seed,
            "m": self.m,
            "mode": self.mode,
            "finetune": self.finetune.to_dict(),
            "uot": self.uot.__dict__,
            "heuristics": list(self.heuristics),
            "library": self.library,
            "base_head": self.base_head,
            "classifier": self.classifier,
            "l2_normalize": self.l2_normalize,
            "support_frozen": self.support_frozen,
            "jobs": self.jobs,
            "reuse_cache": self.reuse_cache,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> RunConfig:
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        if isinstance(obj.get("sampler"), dict):
            s = dict(obj["sampler"])
            kind = s.pop("kind", "uniform")
            if kind == "md":
                obj["sampler"] = SamplerSpec("md", md=MdConfig(**s))
            else:
                obj["sampler"] = SamplerSpec(kind, **s)
        if isinstance(obj.get("finetune"), dict):
            obj["finetune"] = FinetuneConfig.from_dict(obj["finetune"])
        if isinstance(obj.get("uot"), dict):
            obj["uot"] = UotParams(**obj["uot"])
        return cls(**obj)

    def validate(self) -> None:
        for name in self.resolved_methods():
            if name.upper() not in {w.upper() for w in WORKFLOWS} and not name.upper().startswith("UI"):
                raise ConfigError("workflow", f"unknown workflow {name!r}")
        if self.manifest is None:
            raise ConfigError("manifest", "a manifest is required")
        if not Path(self.manifest).is_file():
            raise ConfigError("manifest", f"file not found: {self.manifest}")
        paths = load_manifest(self.manifest)
        for key in ("train", "test"):
            if key not in paths:
                raise ConfigError(f"manifest.{key}", "missing entry")
        for key, p in paths.items():
            if not p.exists():
                raise ConfigError(f"manifest.{key}", f"file not found: {p}")
        upper = [m.upper() for m in self.resolved_methods()]
        if any(m.startswith("DI") for m in upper) and "validation" not in paths:
            raise ConfigError("manifest.validation", "DI needs a domain pool (validation split)")
        if any(m.startswith("UI") for m in upper):
            lib = self.library or (str(paths["library"]) if "library" in paths else None)
            if lib is None or not Path(lib).exists():
                raise ConfigError("library", "UI needs a prebuilt library")
        if self.classifier not in ("ncm", "logreg"):
            raise ConfigError("classifier", f"unknown classifier {self.classifier!r}")
        if self.episodes < 1:
            raise ConfigError("episodes", "must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs", "must be >= 1")
        if self.episodes_file is not None and not Path(self.episodes_file).is_file():
            raise ConfigError("episodes_file", f"file not found: {self.episodes_file}")


@dataclass(eq=False)
class Inputs:
    base: FeatureSet
    target: FeatureSet
    pool: FeatureSet | None
    library: ExtractorLibrary | None
    base_head: LinearHead | None = None


def load_inputs(config: RunConfig) -> Inputs:
    paths = load_manifest(config.manifest)

    def load(key: str) -> FeatureSet | None:
        if key not in paths:
            return None
        fs = load_feature_set(paths[key])
        return l2_normalize(fs) if config.l2_normalize else fs

    lib_path = config.library or (str(paths["library"]) if "library" in paths else None)
    library = ExtractorLibrary.load(lib_path) if lib_path and Path(lib_path).exists() else None
    head = LinearHead.load(config.base_head) if config.base_head else None
    return Inputs(load("train"), load("test"), load("validation"), library, head)


def _accuracy_fn(classifier: str) -> Callable[..., float]:
    return logreg_accuracy if classifier == "logreg" else ncm_accuracy


def adapted_accuracy(adapter: AdapterModel, ep: Episode, classifier: str = "ncm") -> float:
    acc = _accuracy_fn(classifier)
    return acc(
        apply_adapter(adapter, ep.support_features),
        ep.support_labels,
        apply_adapter(adapter, ep.query_features),
        ep.query_labels,
        ways=ep.ways,
    )


class _FinetuneCache:
    """Memoises subset fine-tunes by the sorted id list."""

    def __init__(self, base: FeatureSet, mode: str, config: FinetuneConfig, enabled: bool = True) -> None:
        self.base, self.mode, self.config, self.enabled = base, mode, config, enabled
        self._store: dict[str, AdapterModel] = {}
        self._lock = threading.Lock()

    def get(self, subset: ClassSubset) -> AdapterModel:
        key = subset.key()
        with self._lock:
            if self.enabled and key in self._store:
                return self._store[key]
        # canonical order so the result does not depend on who filled the cache
        canonical = ClassSubset(tuple(sorted(subset.ids)), method=subset.method)
        adapter, _ = finetune_two_step(self.base, canonical, self.mode, self.config)
        if self.enabled:
            with self._lock:
                self._store.setdefault(key, adapter)
        return adapter


class Methods:
    """Builds one ``(episode index, episode) -> accuracy`` callable per method."""

    def __init__(self, config: RunConfig, inputs: Inputs) -> None:
        self.config = config
        self.inputs = inputs
        self.cache = _FinetuneCache(inputs.base, config.mode, config.finetune, config.reuse_cache)
        self.selections: dict[str, ClassSubset] = {}
        self.heuristic_rows: list[tuple] = []
        self._rows_lock = threading.Lock()
        self._base_head = inputs.base_head
        self._base_centroids = None

    @property
    def base_head(self) -> LinearHead:
        if self._base_head is None:
            if self.inputs.library is not None:
                self._base_head = self.inputs.library.base_head
            else:
                self._base_head = fit_linear_head(self.inputs.base)
        return self._base_head

    @property
    def base_centroids(self) -> np.ndarray:
        if self._base_centroids is None:
            self._base_centroids = class_centroids(self.inputs.base).centroids
        return self._base_centroids

    def build(self, name: str) -> Callable[[int, Episode], float]:
        upper = name.upper()
        clf = self.config.classifier
        if upper == "BASELINE":
            return lambda i, ep: adapted_accuracy(AdapterModel("identity"), ep, clf)
        if upper == "DI":
            subset = select_aa(self.inputs.pool.features, self.base_head, self.config.m)
            return self._static(name, subset)
        if upper == "DI-UOT":
            pool = self.inputs.pool
            subset = select_uot(class_centroids(pool).centroids, self.base_centroids, self.config.uot, self.config.m)
            return self._static(name, subset)
        if upper == "TI":
            return lambda i, ep: adapted_accuracy(
                self.cache.get(select_aa(ep.support_features, self.base_head, self.config.m)), ep, clf
            )
        if upper == "TI-UOT":

            def ti_uot(i: int, ep: Episode) -> float:
                support = _episode_centroids(ep)
                subset = select_uot(support, self.base_centroids, self.config.uot, self.config.m)
                return adapted_accuracy(self.cache.get(subset), ep, clf)

            return ti_uot
        if upper == "S":

            def support_finetune(i: int, ep: Episode) -> float:
                cfg = self.config.finetune.with_(seed=split_seed(self.config.finetune.seed, i) & 0x7FFFFFFF)
                adapter, _ = finetune_on_support(ep, self.config.mode, cfg, frozen=self.config.support_frozen)
                return adapted_accuracy(adapter, ep, clf)

            return support_finetune
        if upper.startswith("UI"):
            kind = HeuristicKind.parse(name.split("-", 1)[1]) if "-" in name else HeuristicKind.parse(
                self.config.heuristics[0]
            )
            return self._heuristic(name, kind)
        raise ConfigError("workflow", f"unknown workflow {name!r}")

    def _static(self, name: str, subset: ClassSubset) -> Callable[[int, Episode], float]:
        self.selections[name] = subset
        adapter = self.cache.get(subset)
        clf = self.config.classifier
        return lambda i, ep: adapted_accuracy(adapter, ep, clf)

    def _heuristic(self, name: str, kind: HeuristicKind) -> Callable[[int, Episode], float]:
        library = self.inputs.library

        def run(i: int, ep: Episode) -> float:
            report = select_extractor(kind, ep, library, self.inputs.base, SelectionContext(ep, library, self.inputs.base))
            rows = [
                (i, kind.name, e, report.scores[e], report.entry_accuracies[e], int(e == report.selected))
                for e in range(len(library))
            ]
            with self._rows_lock:
                self.heuristic_rows.extend(rows)
            return report.accuracy

        return run


def _episode_centroids(ep: Episode) -> np.ndarray:
    x = np.asarray(ep.support_features, dtype=np.float64)
    return np.array([x[ep.support_labels == k].mean(axis=0) for k in range(ep.ways)])


def heuristics_csv(rows: list[tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["episode", "heuristic", "entry", "score", "query_acc", "selected"])
    for row in sorted(rows):
        writer.writerow([row[0], row[1], row[2], repr(float(row[3])), repr(float(row[4])), row[5]])
    return buf.getvalue()


def evaluate_methods(
    names: list[str], episodes: list[Episode], methods: Methods, jobs: int = 1
) -> tuple[dict[str, PairedResult], dict[str, str]]:
    """Paired evaluation of several methods; failures recorded, never raised."""
    fns = {}
    errors = {}
    for name in names:
        try:
            fns[name] = methods.build(name)
        except ConfigError:
            raise
        except Exception as exc:
            errors[name] = str(exc)
            log.error("method %s could not be prepared: %s", name, exc)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = _threaded_comparison(fns, episodes, pool)
    else:
        results = run_paired_comparison(fns, episodes, strict=False)
    return results, errors


def _threaded_comparison(fns, episodes, pool) -> dict[str, PairedResult]:
    def wrap(fn):
        def call(args):
            i, ep = args
            try:
                return fn(i, ep), False
            except Exception:
                return None, True

        return call

    base_fn = lambda i, ep: adapted_accuracy(AdapterModel("identity"), ep)  # noqa: E731
    base = np.array([v for v, _ in pool.map(wrap(base_fn), enumerate(episodes))], dtype=np.float64)
    out = {}
    for name, fn in fns.items():
        values = list(pool.map(wrap(fn), enumerate(episodes)))
        acc = np.array([base[i] if bad else v for i, (v, bad) in enumerate(values)], dtype=np.float64)
        failed = tuple(i for i, (_, bad) in enumerate(values) if bad)
        out[name] = PairedResult(name, base, acc, failed)
    return out


def make_episodes(config: RunConfig, target: FeatureSet) -> list[Episode]:
    if config.episodes_file:
        return load_episodes(config.episodes_file, target)
    return episode_stream(target, config.master_seed, config.episodes, config.sampler)


def run_workflow(config: RunConfig) -> tuple[int, dict[str, Path]]:
    """Run the configured workflow(s) and write reports into ``config.out_dir``.

    Writes ``episodes.csv`` (per-episode paired accuracies), ``summary.json``
    (method-level CIs plus the resolved config) and, for UI methods,
    ``heuristics.csv``.
    """
    try:
        config.validate()
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG, {}
    inputs = load_inputs(config)
    episodes = make_episodes(config, inputs.target)
    methods = Methods(config, inputs)
    names = config.resolved_methods()
    results, errors = evaluate_methods(names, episodes, methods, config.jobs)
    if config.classifier == "logreg":
        # baseline must use the same classifier as the methods
        base = np.array([adapted_accuracy(AdapterModel("identity"), ep, "logreg") for ep in episodes])
        results = {k: replace_baseline(r, base) for k, r in results.items()}

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"episodes": out / "episodes.csv", "summary": out / "summary.json"}
    paths["episodes"].write_text(episode_csv(results))
    resolved = config.to_dict()
    resolved["selections"] = {k: v.to_json() for k, v in methods.selections.items()}
    resolved["method_errors"] = errors
    paths["summary"].write_text(summary_json(results, resolved))
    if methods.heuristic_rows:
        paths["heuristics"] = out / "heuristics.csv"
        paths["heuristics"].write_text(heuristics_csv(methods.heuristic_rows))
    partial = errors or any(r.failed for r in results.values())
    return (EXIT_PARTIAL if partial else EXIT_OK), paths


def replace_baseline(result: PairedResult, baseline: np.ndarray) -> PairedResult:
    return PairedResult(result.method, baseline, result.accuracy, result.failed)
