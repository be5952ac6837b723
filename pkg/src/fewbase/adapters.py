"""Linear feature adapters fine-tuned on a class subset.

An adapter sits between the frozen embedding and the classification head.
Fine-tuning runs in two steps: the head alone is fit with Adam while the
adapter stays at its initialisation, then adapter and head are trained
together with Nesterov SGD.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .classifiers import (
    DimensionMismatchError,
    LinearHead,
    decode_f32,
    encode_f32,
    head_loss_and_grad,
    init_head,
)
from .datastore import FeatureSet, StandardizationStats, fit_standardization, STD_FLOOR
from .training import TrainConfig, cross_entropy, optimize, subsample_rows

MODES = ("identity", "square", "square_residual", "projection", "stats_only")

STEP1 = TrainConfig(optimizer="adam", learning_rate=1e-3, epochs=10)
STEP2 = TrainConfig(optimizer="sgd_nesterov", learning_rate=1e-3, momentum=0.9, epochs=20)


@dataclass(frozen=True)
class FinetuneConfig:
    step1: TrainConfig = STEP1
    step2: TrainConfig = STEP2
    subset_cap: int = 10_000
    seed: int = 0
    # prepend standardisation by subset statistics to any mode
    standardize: bool = False
    projection_dim: int | None = None

    def __post_init__(self) -> None:
        if self.subset_cap < 1:
            raise ValueError("subset_cap must be positive")

    def with_(self, **changes) -> FinetuneConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "step1": self.step1.to_dict(),
            "step2": self.step2.to_dict(),
            "subset_cap": self.subset_cap,
            "seed": self.seed,
            "standardize": self.standardize,
            "projection_dim": self.projection_dim,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> FinetuneConfig:
        obj = dict(obj)
        for key in ("step1", "step2"):
            if key in obj:
                obj[key] = TrainConfig(**obj[key])
        return cls(**obj)


@dataclass(eq=False)
class AdapterModel:
    mode: str
    transform: np.ndarray | None = None
    bias: np.ndarray | None = None
    stats: StandardizationStats | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown adapter mode {self.mode!r}")

    @property
    def input_dim(self) -> int | None:
        if self.transform is not None:
            return self.transform.shape[1]
        if self.stats is not None:
            return self.stats.mean.shape[0]
        return None

    @property
    def output_dim(self) -> int | None:
        if self.transform is not None:
            return self.transform.shape[0]
        return self.input_dim

    def to_json(self) -> dict:
        obj: dict = {"mode": self.mode}
        if self.transform is not None:
            obj["transform"] = {
                "rows": self.transform.shape[0],
                "cols": self.transform.shape[1],
                "data": encode_f32(self.transform),
            }
            obj["bias"] = encode_f32(self.bias)
        if self.stats is not None:
            obj["stats"] = {"mean": encode_f32(self.stats.mean), "std": encode_f32(self.stats.std)}
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> AdapterModel:
        transform = bias = stats = None
        if "transform" in obj:
            t = obj["transform"]
            transform = decode_f32(t["data"]).reshape(t["rows"], t["cols"])
            bias = decode_f32(obj["bias"])
        if "stats" in obj:
            stats = StandardizationStats(decode_f32(obj["stats"]["mean"]), decode_f32(obj["stats"]["std"]))
        return cls(obj["mode"], transform, bias, stats)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> AdapterModel:
        return cls.from_json(json.loads(Path(path).read_text()))


IDENTITY = AdapterModel("identity")


def apply_adapter(adapter: AdapterModel, x: np.ndarray) -> np.ndarray:
    if adapter.mode == "identity" and adapter.stats is None:
        return x
    x = np.asarray(x, dtype=np.float64)
    d_in = adapter.input_dim
    if x.ndim != 2 or (d_in is not None and x.shape[1] != d_in):
        raise DimensionMismatchError(f"adapter expects (*, {d_in}) input, got shape {x.shape}")
    if adapter.stats is not None:
        x = adapter.stats.apply(x)
    if adapter.transform is None:
        return x
    out = x @ adapter.transform.T + adapter.bias
    if adapter.mode == "square_residual":
        out = x + out
    return out


def init_adapter(mode: str, d: int, rng: np.random.Generator, projection_dim: int | None = None) -> AdapterModel:
    if mode in ("identity", "stats_only"):
        return AdapterModel(mode)
    if mode == "square_residual":
        return AdapterModel(mode, np.zeros((d, d)), np.zeros(d))
    rows = d if mode == "square" else (projection_dim or d)
    if rows > d:
        raise ValueError(f"projection dimension {rows} exceeds input dimension {d}")
    bound = 1.0 / np.sqrt(d)
    return AdapterModel(mode, rng.uniform(-bound, bound, (rows, d)), rng.uniform(-bound, bound, rows))


def _joint_loss_and_grad(x: np.ndarray, y: np.ndarray, residual: bool, weight_decay: float = 0.0):
    """Cross-entropy of ``head(adapter(x))`` with gradients for A, c, W, b."""

    def loss_and_grad(params: dict, rows: np.ndarray) -> tuple[float, dict]:
        xb = x[rows]
        A, c, W, b = params["A"], params["c"], params["W"], params["b"]
        z = xb @ A.T + c
        if residual:
            z = z + xb
        loss, g = cross_entropy(z @ W.T + b, y[rows])
        dz = g @ W
        grads = {"W": g.T @ z, "b": g.sum(axis=0), "A": dz.T @ xb, "c": dz.sum(axis=0)}
        if weight_decay:
            loss += 0.5 * weight_decay * float(np.sum(W * W))
            grads["W"] = grads["W"] + weight_decay * W
        return loss, grads

    return loss_and_grad


def _two_step(
    x: np.ndarray,
    y: np.ndarray,
    num_classes: int,
    mode: str,
    config: FinetuneConfig,
    run_step2: bool = True,
    stats: StandardizationStats | None = None,
) -> tuple[AdapterModel, LinearHead]:
    rng = np.random.default_rng([config.seed, 0xADA])
    if stats is None and (mode == "stats_only" or config.standardize):
        stats = StandardizationStats(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))
    adapter = init_adapter(mode, x.shape[1], rng, config.projection_dim)
    adapter.stats = stats
    z = apply_adapter(adapter, x)
    head = init_head(num_classes, z.shape[1])

    params = {"W": head.weights, "b": head.bias}
    step1 = config.step1.with_(seed=config.seed)
    hist1 = optimize(params, ["W", "b"], head_loss_and_grad(z, y, step1.weight_decay), len(y), step1)
    hist2: list[float] = []
    if run_step2 and adapter.transform is not None and config.step2.epochs > 0:
        xs = adapter.stats.apply(x) if stats is not None else x
        params.update(A=adapter.transform.copy(), c=adapter.bias.copy())
        step2 = config.step2.with_(seed=config.seed + 1)
        hist2 = optimize(
            params,
            ["A", "c", "W", "b"],
            _joint_loss_and_grad(xs, y, mode == "square_residual", step2.weight_decay),
            len(y),
            step2,
        )
        adapter.transform, adapter.bias = params["A"], params["c"]
    elif run_step2 and config.step2.epochs > 0:
        # no adapter parameters: step 2 continues training the head only
        step2 = config.step2.with_(seed=config.seed + 1)
        hist2 = optimize(params, ["W", "b"], head_loss_and_grad(z, y, step2.weight_decay), len(y), step2)
    adapter.meta = {"train_rows": int(len(y)), "step1_loss": hist1, "step2_loss": hist2}
    return adapter, LinearHead(params["W"], params["b"], hist1 + hist2[1:])


def finetune_two_step(
    base: FeatureSet,
    subset,
    mode: str = "square_residual",
    config: FinetuneConfig = FinetuneConfig(),
) -> tuple[AdapterModel, LinearHead]:
    """Fine-tune an adapter and head on the base classes listed in ``subset``.

    Rows are restricted to the subset's classes and uniformly downsampled to
    ``config.subset_cap``. The head predicts subset-local class indices in
    the order of ``subset.ids``.
    """
    ids = np.asarray(list(getattr(subset, "ids", subset)), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty class subset")
    rows = base.subset_rows(ids)
    rows = rows[subsample_rows(len(rows), config.subset_cap, config.seed)]
    local = np.full(base.num_classes, -1, dtype=np.int64)
    local[ids] = np.arange(len(ids))
    x = base.features[rows].astype(np.float64)
    y = local[base.labels[rows]]
    stats = None
    if mode == "stats_only" or config.standardize:
        stats = fit_standardization(base, ids)
    return _two_step(x, y, len(ids), mode, config, stats=stats)


def finetune_on_support(
    episode,
    mode: str = "square_residual",
    config: FinetuneConfig = FinetuneConfig(),
    frozen: bool = False,
) -> tuple[AdapterModel, LinearHead]:
    """Two-step fine-tuning on an episode's support set.

    ``frozen`` stops after step 1 (head only, adapter left at initialisation).
    """
    x = np.asarray(episode.support_features, dtype=np.float64)
    y = np.asarray(episode.support_labels, dtype=np.int64)
    return _two_step(x, y, episode.ways, mode, config, run_step2=not frozen)


def standardization_adapter(base: FeatureSet, subset) -> AdapterModel:
    return AdapterModel("stats_only", stats=fit_standardization(base, subset))
