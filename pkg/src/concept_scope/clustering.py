"""K-means grouping of channel representatives into concepts, with diagnostics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .io import write_json

MAX_ITER = 300


@dataclass
class ConceptPartition:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    seed: int
    silhouette: float | None = None
    n_iter: int = 0
    converged: bool = True
    history: list[float] = field(default_factory=list)

    def clusters(self) -> dict[int, list[int]]:
        return {j: [int(i) for i in np.flatnonzero(self.labels == j)] for j in range(self.k)}

    def channels(self, concept: int) -> list[int]:
        if not 0 <= concept < self.k:
            raise KeyError(f"unknown cluster id {concept} (k={self.k})")
        return [int(i) for i in np.flatnonzero(self.labels == concept)]


def _as_matrix(reps) -> np.ndarray:
    if isinstance(reps, np.ndarray):
        return np.asarray(reps, dtype=np.float64)
    return np.stack([np.asarray(getattr(r, "coords", r), dtype=np.float64) for r in reps])


def _assign(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = cdist(X, centroids, "sqeuclidean")
    labels = np.argmin(d2, axis=1)  # first minimum wins ties
    return labels, d2[np.arange(len(X)), labels]


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    idx = [int(rng.integers(n))]
    closest = cdist(X, X[idx], "sqeuclidean")[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        closest = np.minimum(closest, cdist(X, X[[nxt]], "sqeuclidean")[:, 0])
    return X[idx].copy()


def _update(X: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> np.ndarray:
    new = centroids.copy()
    empty = []
    for j in range(k):
        members = labels == j
        if members.any():
            new[j] = X[members].mean(axis=0)
        else:
            empty.append(j)
    if empty:
        # re-seed each empty centroid on the point farthest from its own centroid
        dist = ((X - new[labels]) ** 2).sum(axis=1)
        for j in empty:
            p = int(np.argmax(dist))
            new[j] = X[p]
            dist[p] = -1.0
    return new


def kmeans(reps, k: int, seed: int = 0, max_iter: int = MAX_ITER) -> ConceptPartition:
    """Lloyd's algorithm with k-means++ seeding, run to an assignment fixpoint.

    ``history`` holds the inertia after every assignment step; it never
    increases.
    """
    X = _as_matrix(reps)
    n = len(X)
    if not 2 <= k <= n:
        raise ValueError(f"k={k} out of range [2, {n}]")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(X, k, rng)
    labels, d2 = _assign(X, centroids)
    history = [float(d2.sum())]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        centroids = _update(X, labels, centroids, k)
        new_labels, d2 = _assign(X, centroids)
        history.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
    return ConceptPartition(
        k=k,
        labels=labels,
        centroids=centroids,
        inertia=history[-1],
        seed=seed,
        n_iter=it,
        converged=converged,
        history=history,
    )


def inertia(reps, partition: ConceptPartition) -> float:
    X = _as_matrix(reps)
    return float(((X - partition.centroids[partition.labels]) ** 2).sum())


def silhouette(reps, labels) -> float:
    """Mean silhouette coefficient (Euclidean). Singleton clusters score 0."""
    X = _as_matrix(reps)
    labels = np.asarray(getattr(labels, "labels", labels))
    ids, counts = np.unique(labels, return_counts=True)
    if len(X) < 2 or len(ids) < 2:
        raise ValueError("silhouette needs at least 2 non-empty clusters")
    if (counts == 1).all():
        raise ValueError("silhouette is undefined when every cluster is a singleton")
    D = cdist(X, X)
    means = np.stack([D[:, labels == j].sum(axis=1) for j in ids], axis=1)
    own = np.searchsorted(ids, labels)
    size = counts[own]
    a = np.where(size > 1, means[np.arange(len(X)), own] / np.maximum(size - 1, 1), 0.0)
    other = means / counts[None, :]
    other[np.arange(len(X)), own] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def elbow_select(inertias: Mapping[int, float], k_range: Sequence[int] | None = None) -> int:
    """k whose normalised inertia lies farthest below the endpoint chord."""
    ks = sorted(inertias) if k_range is None else list(k_range)
    missing = [k for k in ks if k not in inertias]
    if missing:
        raise ValueError(f"no inertia for k in {missing}")
    if len(ks) < 3:
        raise ValueError("no elbow detected: need at least 3 values of k")
    x = np.asarray(ks, dtype=np.float64)
    y = np.asarray([inertias[k] for k in ks], dtype=np.float64)
    if y[0] == y[-1]:
        raise ValueError("no elbow detected: flat inertia curve")
    xn = (x - x[0]) / (x[-1] - x[0])
    yn = (y - y[-1]) / (y[0] - y[-1])
    gap = (1.0 - xn) - yn
    best = int(np.argmax(gap))
    if gap[best] <= 1e-9:
        raise ValueError("no elbow detected; pass k explicitly")
    return ks[best]


def sweep(reps, k_range: Sequence[int], seed: int = 0) -> dict[int, ConceptPartition]:
    """Fit one partition per k (with silhouette filled in)."""
    X = _as_matrix(reps)
    out = {}
    for k in k_range:
        part = kmeans(X, k, seed)
        try:
            part.silhouette = silhouette(X, part.labels)
        except ValueError:
            part.silhouette = None
        out[k] = part
    return out


def partition_to_json(part: ConceptPartition, config_ref: str = "") -> dict:
    return {
        "k": part.k,
        "seed": part.seed,
        "inertia": part.inertia,
        "silhouette": part.silhouette,
        "clusters": {str(j): ch for j, ch in part.clusters().items()},
        "config_ref": config_ref,
        "kmeans": {"init": "k-means++", "max_iter": MAX_ITER, "n_iter": part.n_iter, "converged": part.converged},
    }


def write_partition(path: str | Path, part: ConceptPartition, config_ref: str = "") -> Path:
    return write_json(path, partition_to_json(part, config_ref))


def read_partition(path: str | Path) -> dict[int, list[int]]:
    """Cluster id -> channel list from a partition file."""
    data = json.loads(Path(path).read_text())
    return {int(j): [int(c) for c in ch] for j, ch in data["clusters"].items()}
