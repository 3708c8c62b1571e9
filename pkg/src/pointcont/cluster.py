"""Balanced hierarchical binary clustering of feature rows.

Each split ranks every row by the ratio of its distance to two half-set
centroids and sends the lower-ratio half to the first child, so cluster
sizes are exactly equal by construction. The initial half-split that seeds
the centroids is deterministic by default: rows ordered by L2 norm, ties by
lexicographic channel comparison, then original position (stable sort). A
seeded random initial division is available behind ``init="random"``.

Splits recurse until groups reach ``cluster_size``, producing S/cluster_size
clusters laid out contiguously in a permutation array. Discrete membership
is treated as a constant by all gradient code.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

METRICS = ("euclidean", "cosine")


@dataclass(frozen=True)
class ClusterAssignment:
    """Bijective row permutation; cluster c owns perm[c*size : (c+1)*size]."""

    perm: np.ndarray
    cluster_size: int
    metric: str = "euclidean"

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        object.__setattr__(self, "perm", perm)
        s = perm.shape[0]
        if perm.ndim != 1 or s == 0:
            raise ValueError("perm must be a non-empty vector")
        if self.cluster_size < 1 or s % self.cluster_size != 0:
            raise ValueError("row count must be a multiple of cluster_size")
        n = s // self.cluster_size
        if n & (n - 1):
            raise ValueError("cluster count must be a power of two")
        if not np.array_equal(np.sort(perm), np.arange(s)):
            raise ValueError("perm must be a bijection on 0..S-1")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric: {self.metric}")

    @property
    def n_rows(self) -> int:
        return self.perm.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.perm.shape[0] // self.cluster_size

    def cluster(self, c: int) -> np.ndarray:
        s = self.cluster_size
        return self.perm[c * s : (c + 1) * s]

    def labels(self) -> np.ndarray:
        """Cluster id per original row index."""
        out = np.empty(self.n_rows, dtype=np.int64)
        out[self.perm] = np.repeat(np.arange(self.n_clusters), self.cluster_size)
        return out


@dataclass
class CostCounter:
    """Coarse arithmetic tally used by the benchmark's overhead report."""

    muls: int = 0
    divs: int = 0
    exps: int = 0

    def total(self) -> int:
        return self.muls + self.divs + self.exps


def pairwise_dist(a, b, metric: str = "euclidean") -> float:
    """Distance (euclidean) or dissimilarity 1 - cos (cosine) of two vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("vector length mismatch")
    if metric == "euclidean":
        return float(np.linalg.norm(a - b))
    if metric == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            return 1.0  # zero vector carries no direction
        return float(1.0 - (a @ b) / (na * nb))
    raise ValueError(f"unknown metric: {metric}")


def admissible_size(s: int, cluster_size: int) -> int:
    """Smallest s' >= s with s' = cluster_size * 2^t (t >= 0)."""
    if s < 1 or cluster_size < 1:
        raise ValueError("sizes must be positive")
    padded = cluster_size
    while padded < s:
        padded *= 2
    return padded


def _group_dist(rows, c, metric, counter=None):
    """Distances from rows (G, s, d) to per-group centroids c (G, d)."""
    g, s, d = rows.shape
    if counter is not None:
        counter.muls += g * s * d
    if metric == "euclidean":
        diff = rows - c[:, None, :]
        return np.sqrt(np.einsum("gsd,gsd->gs", diff, diff))
    dots = np.einsum("gsd,gd->gs", rows, c)
    rn = np.linalg.norm(rows, axis=2)
    cn = np.linalg.norm(c, axis=1)
    denom = rn * cn[:, None]
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom != 0)
    return 1.0 - cos


def _initial_order(rows, norms, init, rng):
    """Stable per-group ordering that seeds the centroid halves."""
    g, s, d = rows.shape
    if init == "random":
        if rng is None:
            raise ValueError('init="random" needs an RNG')
        return np.argsort(rng.random((g, s)), axis=1, kind="stable")
    if init != "norm":
        raise ValueError(f"unknown init: {init}")
    order = np.argsort(norms, axis=1, kind="stable")
    snorm = np.take_along_axis(norms, order, axis=1)
    tied = (snorm[:, 1:] == snorm[:, :-1]).any(axis=1)
    for gi in np.flatnonzero(tied):
        keys = tuple(rows[gi, :, j] for j in range(d - 1, -1, -1)) + (norms[gi],)
        order[gi] = np.lexsort(keys)
    return order


def _ratio_order(rows, norms, r):
    """Stable per-group ordering by ratio, ties by (norm, channels, position)."""
    g, s, d = rows.shape
    order = np.argsort(r, axis=1, kind="stable")
    sr = np.take_along_axis(r, order, axis=1)
    tied = (sr[:, 1:] == sr[:, :-1]).any(axis=1)
    for gi in np.flatnonzero(tied):
        keys = tuple(rows[gi, :, j] for j in range(d - 1, -1, -1)) + (norms[gi], r[gi])
        order[gi] = np.lexsort(keys)
    return order


def _level_split(queries, groups, metric, init, rng, counter):
    """Split every group (G, s) into two balanced children (2G, s/2)."""
    g, s = groups.shape
    rows = queries[groups]  # (G, s, d)
    d = rows.shape[2]
    norms = np.linalg.norm(rows, axis=2)

    order0 = _initial_order(rows, norms, init, rng)
    half = s // 2
    lo = np.take_along_axis(rows, order0[:, :half, None], axis=1)
    hi = np.take_along_axis(rows, order0[:, half:, None], axis=1)
    c1 = lo.mean(axis=1)
    c2 = hi.mean(axis=1)
    if counter is not None:
        counter.divs += 2 * g * d  # centroid means

    d1 = _group_dist(rows, c1, metric, counter)
    d2 = _group_dist(rows, c2, metric, counter)
    r = np.divide(d1, d2, out=np.full_like(d1, np.inf), where=d2 != 0)
    r[(d1 == 0) & (d2 == 0)] = 1.0
    if counter is not None:
        counter.divs += g * s

    order1 = _ratio_order(rows, norms, r)
    first = np.take_along_axis(groups, order1[:, :half], axis=1)
    second = np.take_along_axis(groups, order1[:, half:], axis=1)
    return first, second


def binary_split(queries, metric="euclidean", *, init="norm", rng=None, counter=None):
    """One balanced split; returns (first_half, second_half) index arrays."""
    q = _as_queries(queries)
    s = q.shape[0]
    if s < 2 or s % 2:
        raise ValueError("binary_split needs an even row count >= 2")
    groups = np.arange(s, dtype=np.int64)[None, :]
    first, second = _level_split(q, groups, metric, init, rng, counter)
    return first[0], second[0]


def balanced_cluster(
    queries, cluster_size: int, metric="euclidean", *, init="norm", rng=None, counter=None
) -> ClusterAssignment:
    """Recursively split rows into equal clusters of ``cluster_size``.

    Requires S to be cluster_size times a power of two; callers with other
    sizes pad first (see ``admissible_size``).
    """
    q = _as_queries(queries)
    s = q.shape[0]
    if cluster_size < 1 or s % cluster_size:
        raise ValueError("row count must be a multiple of cluster_size")
    n = s // cluster_size
    if n & (n - 1):
        raise ValueError(
            f"cluster count {n} is not a power of two; pad rows to admissible_size first"
        )
    if metric not in METRICS:
        raise ValueError(f"unknown metric: {metric}")

    groups = np.arange(s, dtype=np.int64)[None, :]
    while groups.shape[1] > cluster_size:
        first, second = _level_split(q, groups, metric, init, rng, counter)
        # children stay adjacent: leaf order is the left-to-right tree order
        groups = np.stack([first, second], axis=1).reshape(-1, groups.shape[1] // 2)
    return ClusterAssignment(perm=groups.reshape(-1), cluster_size=cluster_size, metric=metric)


def balanced_cluster_batch(
    queries, cluster_size: int, metric="euclidean", *, init="norm", rng=None, counter=None
) -> list[ClusterAssignment]:
    """Cluster each (S, d) slice of a (B, S, d) batch independently.

    Equivalent to calling balanced_cluster per slice (each group's ordering
    is self-contained), but all slices share one pass of level arithmetic:
    slice b is lifted into the disjoint index range [b*S, (b+1)*S) so the
    group table can hold every slice at once.
    """
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 3 or q.shape[0] < 1 or q.shape[1] < 1 or q.shape[2] < 1:
        raise ValueError("expected a (B, S, d) query batch")
    if not np.isfinite(q).all():
        raise ValueError("non-finite query features")
    b, s, d = q.shape
    if cluster_size < 1 or s % cluster_size:
        raise ValueError("row count must be a multiple of cluster_size")
    n = s // cluster_size
    if n & (n - 1):
        raise ValueError(
            f"cluster count {n} is not a power of two; pad rows to admissible_size first"
        )
    if metric not in METRICS:
        raise ValueError(f"unknown metric: {metric}")

    flat = q.reshape(b * s, d)
    groups = np.arange(b * s, dtype=np.int64).reshape(b, s)
    while groups.shape[1] > cluster_size:
        first, second = _level_split(flat, groups, metric, init, rng, counter)
        groups = np.stack([first, second], axis=1).reshape(-1, groups.shape[1] // 2)
    # tree order keeps each slice's leaves in a contiguous block of rows
    perms = groups.reshape(b, s) - np.arange(b, dtype=np.int64)[:, None] * s
    return [
        ClusterAssignment(perm=perms[i], cluster_size=cluster_size, metric=metric)
        for i in range(b)
    ]


def _as_queries(queries) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] < 1 or q.shape[1] < 1:
        raise ValueError("expected an (S, d) query array")
    if not np.isfinite(q).all():
        raise ValueError("non-finite query features")
    return q


def write_assignment_csv(fh, entries) -> None:
    """Write (stage, head, point_index, cluster_id) rows.

    ``entries`` yields (stage, head, ClusterAssignment) triples; padded rows
    must already be dropped by the caller.
    """
    writer = csv.writer(fh)
    writer.writerow(["stage", "head", "point_index", "cluster_id"])
    for stage, head, assignment in entries:
        labels = assignment.labels()
        for idx, cid in enumerate(labels):
            writer.writerow([stage, head, idx, int(cid)])
