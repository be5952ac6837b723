"""Feature-set storage, validation and class statistics.

Feature files ("FFS1") are laid out as::

    bytes 0-5   magic b"FFSv1\\n"
    u32 LE      header length H
    H bytes     UTF-8 JSON {"n", "d", "dtype": "f32le", "classes", "split"}
    n*d f32 LE  features, row-major
    n   i32 LE  labels

Statistics are accumulated in float64 and stored back as float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"FFSv1\n"
DTYPE_TAG = "f32le"
MAX_CLASSES = 2**20
STD_FLOOR = 1e-6
SPLITS = ("train", "validation", "test")

_F32 = np.dtype("<f4")
_I32 = np.dtype("<i4")


class FeatureFileError(ValueError):
    """Raised when a feature set or feature file is invalid.

    ``field`` names the offending part of the file or data structure.
    """

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class HeaderError(FeatureFileError):
    pass


class DtypeError(FeatureFileError):
    pass


class TruncatedPayloadError(FeatureFileError):
    pass


class LabelRangeError(FeatureFileError):
    pass


class NonFiniteError(FeatureFileError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Embeddings with integer labels in ``[0, C)`` and a class-name table."""

    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    split: str = "train"

    def __post_init__(self) -> None:
        features = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))
        features.setflags(write=False)
        labels.setflags(write=False)
        validate(self)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def rows_of(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def subset_rows(self, class_ids: Iterable[int]) -> np.ndarray:
        """Row indices whose label is in ``class_ids`` (ascending)."""
        return np.flatnonzero(np.isin(self.labels, np.asarray(list(class_ids), dtype=np.int64)))

    def take(self, rows: np.ndarray) -> FeatureSet:
        return FeatureSet(self.features[rows], self.labels[rows], self.class_names, self.split)

    def equals(self, other: FeatureSet) -> bool:
        return (
            self.class_names == other.class_names
            and self.split == other.split
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
        )


def validate(fs: FeatureSet) -> None:
    if fs.features.ndim != 2:
        raise HeaderError("features", f"expected a 2-d matrix, got shape {fs.features.shape}")
    n, d = fs.features.shape
    if n < 1 or d < 1:
        raise HeaderError("features", f"need n >= 1 and d >= 1, got n={n}, d={d}")
    if fs.labels.shape != (n,):
        raise HeaderError("labels", f"expected {n} labels, got shape {fs.labels.shape}")
    n_classes = len(fs.class_names)
    if n_classes < 1 or n_classes > MAX_CLASSES:
        raise HeaderError("classes", f"class count {n_classes} outside [1, {MAX_CLASSES}]")
    if len(set(fs.class_names)) != n_classes:
        raise HeaderError("classes", "class names must be unique")
    if fs.split not in SPLITS:
        raise HeaderError("split", f"unknown split {fs.split!r}")
    if fs.labels.min() < 0 or fs.labels.max() >= n_classes:
        raise LabelRangeError("labels", f"labels must lie in [0, {n_classes})")
    if not np.isfinite(fs.features).all():
        bad = int(np.argwhere(~np.isfinite(fs.features))[0, 0])
        raise NonFiniteError("features", f"non-finite value in row {bad}")


def save_feature_set(fs: FeatureSet, path: str | Path) -> None:
    validate(fs)
    header = json.dumps(
        {
            "n": fs.n,
            "d": fs.d,
            "dtype": DTYPE_TAG,
            "classes": list(fs.class_names),
            "split": fs.split,
        },
        ensure_ascii=False,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(fs.features.astype(_F32, copy=False).tobytes(order="C"))
        fh.write(fs.labels.astype(_I32, copy=False).tobytes())


def load_feature_set(path: str | Path) -> FeatureSet:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise HeaderError("magic", "not an FFSv1 file")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise HeaderError("header_length", "file ends before header length")
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + hlen:
        raise HeaderError("header", "file ends inside the JSON header")
    try:
        header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError("header", f"malformed JSON header ({exc})") from None
    pos += hlen
    if not isinstance(header, dict):
        raise HeaderError("header", "header must be a JSON object")
    for key, kind in (("n", int), ("d", int), ("dtype", str), ("classes", list), ("split", str)):
        if not isinstance(header.get(key), kind) or isinstance(header.get(key), bool):
            raise HeaderError(key, f"missing or not a {kind.__name__}")
    if header["dtype"] != DTYPE_TAG:
        raise DtypeError("dtype", f"expected {DTYPE_TAG!r}, got {header['dtype']!r}")
    n, d = header["n"], header["d"]
    if n < 1 or d < 1:
        raise HeaderError("n" if n < 1 else "d", "must be >= 1")
    expected = n * d * 4 + n * 4
    payload = blob[pos:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            "payload", f"header declares n={n}, d={d} ({expected} bytes) but only {len(payload)} bytes follow"
        )
    if len(payload) > expected:
        raise TruncatedPayloadError("payload", f"{len(payload) - expected} trailing bytes after labels")
    features = np.frombuffer(payload, dtype=_F32, count=n * d).reshape(n, d)
    labels = np.frombuffer(payload, dtype=_I32, count=n, offset=n * d * 4)
    return FeatureSet(features.astype(np.float32), labels.astype(np.int32), tuple(header["classes"]), header["split"])


def load_manifest(path: str | Path) -> dict[str, Path]:
    """Read a JSON manifest mapping split (or role) names to FFS paths.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    raw = json.loads(path.read_text())
    if not isinstance(raw, dict):
        raise HeaderError("manifest", "manifest must be a JSON object")
    return {key: (path.parent / value).resolve() for key, value in raw.items()}


def l2_normalize(fs: FeatureSet) -> FeatureSet:
    x = fs.features.astype(np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return FeatureSet((x / np.maximum(norms, 1e-12)).astype(np.float32), fs.labels, fs.class_names, fs.split)


@dataclass(frozen=True, eq=False)
class CentroidTable:
    centroids: np.ndarray
    counts: np.ndarray


def class_centroids(fs: FeatureSet) -> CentroidTable:
    n_classes = fs.num_classes
    sums = np.zeros((n_classes, fs.d), dtype=np.float64)
    np.add.at(sums, fs.labels, fs.features.astype(np.float64))
    counts = np.bincount(fs.labels, minlength=n_classes).astype(np.int64)
    # classes without examples keep a zero centroid
    centroids = sums / np.maximum(counts, 1)[:, None]
    return CentroidTable(centroids, counts)


@dataclass(frozen=True, eq=False)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def fit_standardization(fs: FeatureSet, subset: Sequence[int] | object) -> StandardizationStats:
    """Column mean/std over the rows whose label belongs to ``subset``.

    ``subset`` may be a ``ClassSubset`` or a plain sequence of class ids.
    Population std (ddof=0), floored at ``STD_FLOOR``.
    """
    ids = np.asarray(list(getattr(subset, "ids", subset)), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty class subset")
    if ids.min() < 0 or ids.max() >= fs.num_classes:
        raise LabelRangeError("subset", f"class ids must lie in [0, {fs.num_classes})")
    rows = fs.subset_rows(ids)
    if rows.size == 0:
        raise ValueError("subset selects no rows")
    x = fs.features[rows].astype(np.float64)
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return StandardizationStats(mean, std)


def synthetic_class_names(n_classes: int, prefix: str = "class") -> tuple[str, ...]:
    width = len(str(max(n_classes - 1, 0)))
    return tuple(f"{prefix}_{i:0{width}d}" for i in range(n_classes))


def load_semantic(path: str | Path, class_names: Sequence[str]) -> np.ndarray:
    """Load one semantic vector per class from an FFS file and order it by ``class_names``.

    Row ``i`` of the file is the vector for the class with label ``i`` in its own table.
    """
    fs = load_feature_set(path)
    by_name = {}
    for row, label in enumerate(fs.labels):
        by_name.setdefault(fs.class_names[label], row)
    missing = [name for name in class_names if name not in by_name]
    if missing:
        raise HeaderError("classes", f"semantic file lacks {len(missing)} classes, e.g. {missing[0]!r}")
    return fs.features[[by_name[name] for name in class_names]].astype(np.float64)
