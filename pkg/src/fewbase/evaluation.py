"""Paired-trial evaluation and diagnostic analyses."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .classifiers import LinearHead, ncm_accuracy, silhouette_score
from .datastore import FeatureSet
from .episodes import Episode
from .selection import average_activations

Z95 = 1.96

# a method maps (episode index, episode) to its query accuracy
MethodFn = Callable[[int, Episode], float]


def paired_ci(deltas: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% half-width ``1.96 s / sqrt(n)`` with ``s`` the sample std."""
    d = np.asarray(deltas, dtype=np.float64)
    if d.size < 2:
        raise ValueError("need at least two paired trials")
    return float(d.mean()), float(Z95 * d.std(ddof=1) / math.sqrt(d.size))


unpaired_ci = paired_ci  # same formula applied to raw accuracies


@dataclass(eq=False)
class PairedResult:
    method: str
    baseline: np.ndarray
    accuracy: np.ndarray
    failed: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.baseline = np.asarray(self.baseline, dtype=np.float64)
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        if self.baseline.shape != self.accuracy.shape:
            raise ValueError("baseline and method accuracies must be paired")

    @property
    def deltas(self) -> np.ndarray:
        return self.accuracy - self.baseline

    @property
    def mean_delta(self) -> float:
        return paired_ci(self.deltas)[0]

    @property
    def half_width(self) -> float:
        return paired_ci(self.deltas)[1]

    def summary(self) -> dict:
        mean, hw = paired_ci(self.deltas)
        acc_mean, acc_hw = unpaired_ci(self.accuracy)
        base_mean, base_hw = unpaired_ci(self.baseline)
        return {
            "method": self.method,
            "episodes": int(self.deltas.size),
            "mean_delta": mean,
            "paired_half_width": hw,
            "mean_accuracy": acc_mean,
            "unpaired_half_width": acc_hw,
            "baseline_accuracy": base_mean,
            "baseline_unpaired_half_width": base_hw,
            "failed_episodes": list(self.failed),
        }


def baseline_accuracy(_: int, ep: Episode) -> float:
    """Identity features with an NCM classifier."""
    return ncm_accuracy(ep.support_features, ep.support_labels, ep.query_features, ep.query_labels, ep.ways)


class EpisodeFailure(RuntimeError):
    def __init__(self, method: str, index: int, cause: BaseException) -> None:
        super().__init__(f"method {method!r} failed on episode {index}: {cause}")
        self.method = method
        self.index = index


def run_paired_comparison(
    methods: dict[str, MethodFn],
    episodes: Sequence[Episode],
    baseline: MethodFn = baseline_accuracy,
    strict: bool = True,
) -> dict[str, PairedResult]:
    """Evaluate every method on the same episodes against the baseline.

    With ``strict`` off, a failing episode is recorded in ``failed`` and the
    method scores the baseline accuracy there (zero delta).
    """
    base = np.array([baseline(i, ep) for i, ep in enumerate(episodes)])
    results = {}
    for name, fn in methods.items():
        acc = np.empty(len(episodes))
        failed = []
        for i, ep in enumerate(episodes):
            try:
                acc[i] = fn(i, ep)
            except Exception as exc:
                if strict:
                    raise EpisodeFailure(name, i, exc) from exc
                failed.append(i)
                acc[i] = base[i]
        results[name] = PairedResult(name, base, acc, tuple(failed))
    return results


def episode_csv(results: dict[str, PairedResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["episode", "method", "baseline_acc", "method_acc", "delta"])
    for name, res in results.items():
        for i, (b, a) in enumerate(zip(res.baseline, res.accuracy)):
            writer.writerow([i, name, repr(float(b)), repr(float(a)), repr(float(a - b))])
    return buf.getvalue()


def summary_json(results: dict[str, PairedResult], config: dict | None = None) -> str:
    payload = {"config": config or {}, "methods": [r.summary() for r in results.values()]}
    return json.dumps(payload, indent=2, sort_keys=True)


def boost_vs_baseline_correlation(result: PairedResult) -> float:
    x, y = result.baseline, result.deltas
    if x.size < 3:
        raise ValueError("need at least three episodes")
    if x.std() == 0 or y.std() == 0:
        raise ValueError("correlation undefined for zero variance")
    xc, yc = x - x.mean(), y - y.mean()
    return float(np.sum(xc * yc) / math.sqrt(np.sum(xc * xc) * np.sum(yc * yc)))


@dataclass(eq=False)
class ActivationProfile:
    mean_activation: np.ndarray  # per base class
    order: np.ndarray  # class ids by decreasing activation
    cumulative: np.ndarray  # prefix sums of the sorted activations

    def classes_for(self, fraction: float = 0.9) -> int:
        """Smallest M whose top-M classes hold at least ``fraction`` of the activation."""
        total = self.cumulative[-1]
        # relative slack keeps an exact 0.9 from being lost to rounding
        idx = np.searchsorted(self.cumulative, fraction * total * (1 - 1e-12), side="left")
        return int(min(idx + 1, len(self.cumulative)))


def activation_profile(base_head: LinearHead, target: FeatureSet | np.ndarray) -> ActivationProfile:
    x = target.features if isinstance(target, FeatureSet) else target
    p = average_activations(x, base_head)
    order = np.argsort(-p, kind="stable")
    return ActivationProfile(p, order, np.cumsum(p[order]))


def silhouette_delta(
    baseline_features: np.ndarray, adapted_features: np.ndarray, labels: np.ndarray
) -> tuple[float, float, float]:
    before = silhouette_score(baseline_features, labels)
    after = silhouette_score(adapted_features, labels)
    return before, after, after - before
