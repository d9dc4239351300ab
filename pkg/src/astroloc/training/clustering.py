"""k-means over region features and single-cluster batch sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .. import kernels


@dataclass(frozen=True)
class ClusterConfig:
    num_clusters: int = 200
    refresh_every: int = 5000
    reference_year: int = 2021

    def __post_init__(self):
        if self.num_clusters < 1 or self.refresh_every < 1:
            raise ValueError("num_clusters and refresh_every must be positive")


@dataclass(frozen=True)
class BatchSpec:
    quadruplets_per_batch: int = 32
    images_per_quadruplet: int = 4

    def __post_init__(self):
        if self.quadruplets_per_batch < 2:
            raise ValueError("a batch needs at least two quadruplets to have negatives")
        if self.images_per_quadruplet < 1:
            raise ValueError("images_per_quadruplet must be positive")

    @property
    def batch_size(self) -> int:
        return self.quadruplets_per_batch * self.images_per_quadruplet


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    n_iter: int


def _kmeans_pp(X, k, rng) -> np.ndarray:
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    d2 = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center; take unused ones in order
            unused = np.setdiff1d(np.arange(n), centers)
            nxt = int(unused[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[centers].copy()


def kmeans(features, num_clusters: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds; no cluster is left empty."""
    X = np.ascontiguousarray(features, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= num_clusters <= n:
        raise ValueError(f"cannot form {num_clusters} clusters from {n} points")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(X, num_clusters, rng)
    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        labels, dists = kernels.assign_nearest(X, centroids)
        counts = np.bincount(labels, minlength=num_clusters)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # reseed from the points farthest from their current centroid
            far = np.argsort(-dists, kind="stable")
            taken = 0
            for c in empty:
                while counts[labels[far[taken]]] <= 1:
                    taken += 1
                p = far[taken]
                counts[labels[p]] -= 1
                labels[p] = c
                counts[c] = 1
                taken += 1
        new = np.zeros_like(centroids)
        np.add.at(new, labels, X)
        new /= counts[:, None]
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    labels, _ = kernels.assign_nearest(X, centroids)
    return KMeansResult(labels, centroids, it)


@dataclass(frozen=True)
class Batch:
    cluster: int
    regions: np.ndarray  # indices into the region list


def clustered_batches(assignments, regions: Sequence, spec: BatchSpec, rng, centroids=None) -> Iterator[Batch]:
    """Endless stream of batches, each drawn from a single cluster.

    Consecutive batches use different clusters whenever more than one
    exists. Clusters smaller than a batch are topped up with members of the
    clusters whose centroids are nearest (all drawn regions are then
    attributed to the chosen cluster).
    """
    labels = np.asarray(assignments)
    if labels.shape[0] != len(regions):
        raise ValueError("assignments must cover every region")
    if len(set(regions)) < 2:
        raise ValueError("need at least two distinct regions to form batches")
    q = spec.quadruplets_per_batch
    clusters = np.unique(labels)
    members = {int(c): np.flatnonzero(labels == c) for c in clusters}
    if centroids is not None:
        cents = np.asarray(centroids, dtype=np.float64)
        order = {int(c): [int(o) for o in np.argsort(((cents - cents[c]) ** 2).sum(axis=1), kind="stable")
                          if o != c and o in members]
                 for c in members}
    else:
        order = {int(c): [int(o) for o in clusters if o != c] for c in members}
    prev = None
    while True:
        choices = clusters if (len(clusters) == 1 or prev is None) else clusters[clusters != prev]
        c = int(rng.choice(choices))
        own = members[c]
        if own.size >= q:
            picked = rng.choice(own, size=q, replace=False)
        else:
            picked = list(own)
            for other in order[c]:
                need = q - len(picked)
                if need <= 0:
                    break
                extra = members[other]
                picked.extend(rng.choice(extra, size=min(need, extra.size), replace=False))
            picked = np.asarray(picked)
        if len({regions[i] for i in picked}) < 2:
            continue
        prev = c
        yield Batch(c, np.asarray(picked, dtype=np.int64))


def random_batches(n_regions: int, spec: BatchSpec, rng) -> Iterator[Batch]:
    """Batches of uniformly random regions (the non-clustered baseline)."""
    q = min(spec.quadruplets_per_batch, n_regions)
    while True:
        yield Batch(-1, rng.choice(n_regions, size=q, replace=False).astype(np.int64))
