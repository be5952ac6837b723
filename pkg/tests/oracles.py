"""Independent reference implementations used as test oracles.

These are deliberately naive (loops, from-scratch recomputation) and share
no code with the package beyond plain numpy.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def naive_class_means(x: np.ndarray, y: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((n_classes, x.shape[1]))
    for c in range(n_classes):
        acc = np.zeros(x.shape[1])
        count = 0
        for row, label in zip(x, y):
            if label == c:
                acc += row
                count += 1
        out[c] = acc / count
    return out


def nearest_centroid_scan(centroids: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Per-query loop over centroids; strict ``<`` keeps the lowest index on ties."""
    out = np.empty(len(queries), dtype=np.int64)
    for qi, q in enumerate(queries):
        best, best_d = 0, math.inf
        for k, c in enumerate(centroids):
            d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(q, c)))
            if d < best_d:
                best, best_d = k, d
        out[qi] = best
    return out


def ward_reference(points: np.ndarray, rtol: float = 1e-12) -> list[tuple[int, int, float, int]]:
    """From-scratch Ward: each step recomputes the variance increase of every pair.

    Returns ``(left node, right node, distance, size)`` with SciPy's distance
    convention ``sqrt(2 * increase)`` and lexicographic node-pair tie breaking.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    clusters = {i: [i] for i in range(n)}
    merges = []
    for step in range(n - 1):
        costs = []
        for a, b in itertools.combinations(sorted(clusters), 2):
            pa, pb = x[clusters[a]], x[clusters[b]]
            na, nb = len(pa), len(pb)
            diff = pa.mean(axis=0) - pb.mean(axis=0)
            costs.append((na * nb / (na + nb) * float(diff @ diff), a, b))
        best = min(c for c, _, _ in costs)
        ties = [(a, b, c) for c, a, b in costs if c <= best + abs(best) * rtol]
        a, b, c = min(ties)
        merged = clusters.pop(a) + clusters.pop(b)
        clusters[n + step] = merged
        merges.append((a, b, math.sqrt(2 * c), len(merged)))
    return merges


def balanced_sinkhorn(cost: np.ndarray, a: np.ndarray, b: np.ndarray, eps: float, iters: int = 20000) -> np.ndarray:
    """Textbook balanced Sinkhorn with kernel ``exp(-C/eps)`` (requires sum a = sum b)."""
    k = np.exp(-cost / eps)
    u = np.ones_like(a)
    v = np.ones_like(b)
    for _ in range(iters):
        u = a / (k @ v)
        v = b / (k.T @ u)
    return u[:, None] * k * v[None, :]


def fim_monte_carlo(weights: np.ndarray, bias: np.ndarray, x: np.ndarray, draws: int, seed: int):
    """Diagonal FIM from sampled score vectors ``grad log p(y|x)`` with ``y ~ p(.|x)``."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(x), size=draws)
    xs = x[idx]
    logits = xs @ weights.T + bias
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(draws)
    y = (p.cumsum(axis=1) < u[:, None]).sum(axis=1)
    y = np.minimum(y, p.shape[1] - 1)
    g = -p
    g[np.arange(draws), y] += 1.0  # dlogp/dlogits
    w_diag = (g * g).T @ (xs * xs) / draws
    b_diag = (g * g).mean(axis=0)
    return w_diag, b_diag


def central_difference(f, params: dict, key: str, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f(params)`` with respect to ``params[key]``."""
    base = params[key]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        old = base[idx]
        base[idx] = old + h
        up = f(params)
        base[idx] = old - h
        down = f(params)
        base[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def silhouette_naive(x: np.ndarray, y: np.ndarray) -> float:
    labels = sorted(set(y.tolist()))
    total = 0.0
    for i in range(len(x)):
        own = [j for j in range(len(x)) if y[j] == y[i] and j != i]
        if not own:
            continue
        a = sum(np.linalg.norm(x[i] - x[j]) for j in own) / len(own)
        b = min(
            np.mean([np.linalg.norm(x[i] - x[j]) for j in range(len(x)) if y[j] == c]) for c in labels if c != y[i]
        )
        total += (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return total / len(x)
