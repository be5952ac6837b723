"""Few-shot classifiers: nearest class mean, softmax heads, silhouette score."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .datastore import FeatureSet
from .training import TrainConfig, cross_entropy, optimize, softmax, subsample_rows

# chunk rows so the s x K x d difference tensor stays small
_NCM_CHUNK = 4096

STEP1_CONFIG = TrainConfig(optimizer="adam", learning_rate=1e-3, epochs=10)
LOGREG_CONFIG = TrainConfig(
    optimizer="adam", learning_rate=1e-2, epochs=100, batch_size=10_000, weight_decay=1e-3
)


class DimensionMismatchError(ValueError):
    pass


def _check_dim(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d:
        raise DimensionMismatchError(f"expected (*, {d}) input, got shape {x.shape}")
    return x


@dataclass(frozen=True, eq=False)
class NcmModel:
    centroids: np.ndarray
    class_map: tuple[int, ...] = ()
    shift: np.ndarray | None = None
    normalize: bool = False

    def preprocess(self, x: np.ndarray) -> np.ndarray:
        x = _check_dim(x, self.centroids.shape[1])
        return _preprocess(x, self.shift, self.normalize)


def _preprocess(x: np.ndarray, shift: np.ndarray | None, normalize: bool) -> np.ndarray:
    if shift is not None:
        x = x - shift
    if normalize:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    return x


def fit_ncm(
    support_features: np.ndarray,
    support_labels: np.ndarray,
    ways: int | None = None,
    class_map: tuple[int, ...] = (),
    center: bool = False,
    normalize: bool = False,
) -> NcmModel:
    """One centroid per class label ``0..ways-1``.

    ``center`` subtracts the support mean and ``normalize`` projects onto the
    unit sphere before averaging; both are applied to queries at prediction.
    """
    x = np.asarray(support_features, dtype=np.float64)
    y = np.asarray(support_labels, dtype=np.int64)
    if ways is None:
        ways = int(y.max()) + 1
    shift = x.mean(axis=0) if center else None
    x = _preprocess(x, shift, normalize)
    counts = np.bincount(y, minlength=ways)
    if (counts[:ways] == 0).any():
        empty = int(np.flatnonzero(counts[:ways] == 0)[0])
        raise ValueError(f"class {empty} has no support examples")
    sums = np.zeros((ways, x.shape[1]))
    np.add.at(sums, y, x)
    return NcmModel(sums / counts[:ways, None], tuple(class_map), shift, normalize)


def predict_ncm(model: NcmModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels and the Euclidean distance matrix.

    Ties go to the lowest class index.
    """
    x = model.preprocess(x)
    dist = np.empty((x.shape[0], model.centroids.shape[0]))
    for start in range(0, x.shape[0], _NCM_CHUNK):
        diff = x[start : start + _NCM_CHUNK, None, :] - model.centroids[None, :, :]
        dist[start : start + _NCM_CHUNK] = np.sqrt(np.einsum("skd,skd->sk", diff, diff))
    return dist.argmin(axis=1), dist


def ncm_accuracy(
    support: np.ndarray,
    support_labels: np.ndarray,
    query: np.ndarray,
    query_labels: np.ndarray,
    ways: int | None = None,
    center: bool = False,
    normalize: bool = False,
) -> float:
    model = fit_ncm(support, support_labels, ways, center=center, normalize=normalize)
    pred, _ = predict_ncm(model, query)
    return float(np.mean(pred == np.asarray(query_labels)))


@dataclass(eq=False)
class LinearHead:
    """Affine map ``x -> x W^T + b`` producing one logit per class."""

    weights: np.ndarray
    bias: np.ndarray
    loss_history: list[float] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1]

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = _check_dim(x, self.d)
        return x @ self.weights.T + self.bias

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "C": self.num_classes,
            "weights": encode_f32(self.weights),
            "bias": [float(b) for b in self.bias.astype(np.float32)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> LinearHead:
        weights = decode_f32(obj["weights"]).reshape(obj["C"], obj["d"])
        bias = np.asarray(obj["bias"], dtype=np.float32).astype(np.float64)
        if bias.shape != (obj["C"],):
            raise ValueError("bias length does not match C")
        return cls(weights, bias)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> LinearHead:
        return cls.from_json(json.loads(Path(path).read_text()))


def encode_f32(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def decode_f32(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").astype(np.float64)


def init_head(num_classes: int, d: int) -> LinearHead:
    return LinearHead(np.zeros((num_classes, d)), np.zeros(num_classes))


def head_loss_and_grad(x: np.ndarray, y: np.ndarray, weight_decay: float = 0.0):
    """Loss/gradient callable for a linear softmax head on fixed inputs.

    Parameters are ``W`` (C x d) and ``b`` (C,). The L2 penalty
    ``weight_decay / 2 * ||W||^2`` is added to the loss.
    """

    def loss_and_grad(params: dict, rows: np.ndarray) -> tuple[float, dict]:
        xb = x[rows]
        W, b = params["W"], params["b"]
        loss, g = cross_entropy(xb @ W.T + b, y[rows])
        grads = {"W": g.T @ xb, "b": g.sum(axis=0)}
        if weight_decay:
            loss += 0.5 * weight_decay * float(np.sum(W * W))
            grads["W"] = grads["W"] + weight_decay * W
        return loss, grads

    return loss_and_grad


def _fit_head(x: np.ndarray, y: np.ndarray, num_classes: int, config: TrainConfig) -> LinearHead:
    rows = subsample_rows(x.shape[0], config.max_examples, config.seed)
    x, y = x[rows], y[rows]
    head = init_head(num_classes, x.shape[1])
    params = {"W": head.weights, "b": head.bias}
    history = optimize(params, ["W", "b"], head_loss_and_grad(x, y, config.weight_decay), x.shape[0], config)
    return LinearHead(params["W"], params["b"], history)


def fit_linear_head(fs: FeatureSet, config: TrainConfig = STEP1_CONFIG) -> LinearHead:
    """Train a softmax head over all ``C`` classes of ``fs``."""
    if fs.num_classes < 2:
        raise ValueError("need at least two classes")
    return _fit_head(fs.features.astype(np.float64), fs.labels.astype(np.int64), fs.num_classes, config)


def fit_logistic_regression(
    support_features: np.ndarray,
    support_labels: np.ndarray,
    config: TrainConfig = LOGREG_CONFIG,
    ways: int | None = None,
) -> LinearHead:
    y = np.asarray(support_labels, dtype=np.int64)
    ways = int(y.max()) + 1 if ways is None else ways
    if ways < 2:
        raise ValueError("need at least two classes")
    return _fit_head(np.asarray(support_features, dtype=np.float64), y, ways, config)


def predict_softmax(head: LinearHead, x: np.ndarray) -> np.ndarray:
    return softmax(head.logits(x))


def logreg_accuracy(
    support: np.ndarray,
    support_labels: np.ndarray,
    query: np.ndarray,
    query_labels: np.ndarray,
    config: TrainConfig = LOGREG_CONFIG,
    ways: int | None = None,
) -> float:
    head = fit_logistic_regression(support, support_labels, config, ways)
    pred = head.logits(query).argmax(axis=1)
    return float(np.mean(pred == np.asarray(query_labels)))


def silhouette_score(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient under Euclidean distance.

    Members of singleton classes contribute 0.
    """
    x = np.asarray(features, dtype=np.float64)
    _, y = np.unique(np.asarray(labels), return_inverse=True)
    n_classes = int(y.max()) + 1
    if n_classes < 2:
        raise ValueError("silhouette score needs at least two classes")
    dist = cdist(x, x)
    onehot = np.eye(n_classes)[y]
    sums = dist @ onehot  # n x K: total distance to each class
    counts = onehot.sum(axis=0)
    own = counts[y]
    a = sums[np.arange(len(y)), y] / np.maximum(own - 1, 1)
    mean_other = sums / counts
    mean_other[np.arange(len(y)), y] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())
