"""Choosing base-class subsets from a set of target examples.

Two selectors:

* average activations: rank base classes by the base head's mean softmax
  score over the examples;
* unbalanced optimal transport between target and base class centroids,
  ranking base classes by the column marginals of the entropic plan.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from scipy.spatial.distance import cdist

from .classifiers import LinearHead, predict_softmax

DEFAULT_M = 50


@dataclass(frozen=True)
class ClassSubset:
    ids: tuple[int, ...]
    scores: tuple[float, ...] = ()
    method: str = "manual"

    def __post_init__(self) -> None:
        ids = tuple(int(i) for i in self.ids)
        scores = tuple(float(s) for s in self.scores) if self.scores else tuple(1.0 for _ in ids)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "scores", scores)
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be unique")
        if len(scores) != len(ids):
            raise ValueError("one score per id required")
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise ValueError("scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.ids)

    def key(self) -> str:
        return ",".join(map(str, sorted(self.ids)))

    def to_json(self) -> dict:
        return {"method": self.method, "ids": list(self.ids), "scores": list(self.scores)}

    @classmethod
    def from_json(cls, obj: dict) -> ClassSubset:
        return cls(tuple(obj["ids"]), tuple(obj.get("scores", ())), obj.get("method", "manual"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> ClassSubset:
        return cls.from_json(json.loads(Path(path).read_text()))


def _top_m(scores: np.ndarray, m: int, method: str) -> ClassSubset:
    if m < 1:
        raise ValueError("M must be >= 1")
    # stable sort on the negated score: equal scores keep ascending class id
    order = np.argsort(-scores, kind="stable")[:m]
    return ClassSubset(tuple(order.tolist()), tuple(scores[order].tolist()), method)


def average_activations(examples: np.ndarray, head: LinearHead) -> np.ndarray:
    return predict_softmax(head, examples).mean(axis=0)


def select_aa(examples: np.ndarray, head: LinearHead, m: int = DEFAULT_M) -> ClassSubset:
    """Top-``m`` base classes by mean softmax activation over ``examples``."""
    examples = np.asarray(examples)
    if examples.ndim != 2 or examples.shape[0] < 1:
        raise ValueError("need at least one example")
    return _top_m(average_activations(examples, head), m, "aa")


@dataclass(frozen=True)
class UotParams:
    """Entropic unbalanced OT settings.

    With ``relative`` set, ``epsilon`` and ``tau`` are multiples of the
    median cost so the solution is invariant to rescaling the cost.
    """

    epsilon: float = 0.05
    tau: float = 1.0
    max_iters: int = 1000
    tolerance: float = 1e-6
    relative: bool = True

    def __post_init__(self) -> None:
        if self.epsilon <= 0 or self.tau <= 0:
            raise ValueError("epsilon and tau must be > 0")

    def absolute(self, cost: np.ndarray) -> tuple[float, float]:
        if not self.relative:
            return self.epsilon, self.tau
        scale = float(np.median(cost))
        if not scale > 0:
            scale = 1.0
        return self.epsilon * scale, self.tau * scale


class SinkhornError(RuntimeError):
    pass


class UotConvergenceError(RuntimeError):
    def __init__(self, residual: float, iters: int) -> None:
        super().__init__(f"unbalanced Sinkhorn did not converge in {iters} iterations (residual {residual:.3g})")
        self.residual = residual


@dataclass(eq=False)
class SinkhornResult:
    plan: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    residuals: list[float] = field(default_factory=list)
    converged: bool = False

    def __iter__(self):
        return iter((self.plan, self.row_marginals, self.col_marginals))


def unbalanced_sinkhorn(
    cost: np.ndarray, mass_rows: np.ndarray, mass_cols: np.ndarray, params: UotParams = UotParams()
) -> SinkhornResult:
    """Entropic OT with KL-relaxed marginals, iterated in the log domain.

    Solves ``min <C, P> + eps KL(P | a b^T) + tau KL(P 1 | a) + tau KL(P^T 1 | b)``
    by alternating ``log u = f (log a - LSE(log K + log v))`` and its column
    counterpart with ``f = tau / (tau + eps)``. The residual is the largest
    change of a log plan entry in one sweep.
    """
    cost = np.asarray(cost, dtype=np.float64)
    a = np.asarray(mass_rows, dtype=np.float64)
    b = np.asarray(mass_cols, dtype=np.float64)
    if cost.shape != (a.size, b.size):
        raise ValueError(f"cost shape {cost.shape} does not match masses ({a.size}, {b.size})")
    if not np.isfinite(cost).all() or (cost < 0).any():
        raise ValueError("cost must be finite and nonnegative")
    eps, tau = params.absolute(cost)
    fi = tau / (tau + eps)
    with np.errstate(over="ignore", divide="ignore"):
        log_k = -cost / eps + np.log(a)[:, None] + np.log(b)[None, :]
    log_a, log_b = np.log(a), np.log(b)
    log_u = np.zeros(a.size)
    log_v = np.zeros(b.size)
    residuals: list[float] = []
    converged = False
    for _ in range(params.max_iters):
        with np.errstate(divide="ignore", invalid="ignore"):
            new_u = fi * (log_a - logsumexp(log_k + log_v[None, :], axis=1))
            new_v = fi * (log_b - logsumexp(log_k + new_u[:, None], axis=0))
        if not (np.isfinite(new_u).all() and np.isfinite(new_v).all()):
            raise SinkhornError("scaling vectors became non-finite; increase epsilon")
        du, dv = new_u - log_u, new_v - log_v
        # largest change of any log plan entry, blind to the (u * s, v / s) gauge
        res = float(max(abs(du.max() + dv.max()), abs(du.min() + dv.min())))
        log_u, log_v = new_u, new_v
        residuals.append(res)
        if res <= params.tolerance:
            converged = True
            break
    plan = np.exp(log_u[:, None] + log_k + log_v[None, :])
    return SinkhornResult(plan, plan.sum(axis=1), plan.sum(axis=0), residuals, converged)


def select_uot(
    target_centroids: np.ndarray,
    base_centroids: np.ndarray,
    params: UotParams = UotParams(),
    m: int = DEFAULT_M,
) -> ClassSubset:
    """Top-``m`` base classes by transported mass, unit mass on every class."""
    t = np.asarray(target_centroids, dtype=np.float64)
    bc = np.asarray(base_centroids, dtype=np.float64)
    if t.shape[0] < 1 or bc.shape[0] < 1:
        raise ValueError("need at least one class on each side")
    cost = cdist(t, bc)
    result = unbalanced_sinkhorn(cost, np.ones(t.shape[0]), np.ones(bc.shape[0]), params)
    if not result.converged:
        raise UotConvergenceError(result.residuals[-1] if result.residuals else float("nan"), params.max_iters)
    return _top_m(result.col_marginals, m, "uot")
