"""Spatial sampling and grouping: farthest point sampling and kNN patches.

All routines are deterministic functions of the point multiset. Ties are
broken by lexicographic coordinate comparison so that permuting the input
rows permutes the result indices consistently (exactness verified in tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PatchIndex:
    """Per-center neighbor table; all indices refer to the parent cloud."""

    centers: np.ndarray    # (M,) int64, distinct
    neighbors: np.ndarray  # (M, k) int64, row m contains centers[m]
    n_points: int

    def __post_init__(self):
        c, nb = self.centers, self.neighbors
        if c.ndim != 1 or nb.ndim != 2 or nb.shape[0] != c.shape[0]:
            raise ValueError("patch index shape mismatch")
        if len(np.unique(c)) != len(c):
            raise ValueError("center indices must be distinct")
        for arr in (c, nb):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n_points):
                raise ValueError("patch index out of range")
        if not (nb == c[:, None]).any(axis=1).all():
            raise ValueError("each neighbor row must contain its center")

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


def _as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("expected an (N, 3) point array")
    if pts.shape[0] < 1:
        raise ValueError("empty point cloud")
    if not np.isfinite(pts).all():
        raise ValueError("non-finite coordinates")
    return pts


def _argmax_lex(values: np.ndarray, pts: np.ndarray) -> int:
    """Index of the maximum; ties resolved by smallest (x, y, z), then index."""
    pick = int(np.argmax(values))
    vmax = values[pick]
    if np.count_nonzero(values == vmax) == 1:
        return pick
    cand = np.flatnonzero(values == vmax)
    sub = pts[cand]
    best = np.lexsort((cand, sub[:, 2], sub[:, 1], sub[:, 0]))[0]
    return int(cand[best])


def fps(points, m_count: int) -> np.ndarray:
    """Greedy farthest point sampling.

    The first pick is the point farthest from the cloud centroid; every
    later pick maximizes the minimum distance to the points already chosen.
    The centroid is computed over lexicographically sorted rows so the seed
    does not depend on input row order.
    """
    pts = _as_cloud(points)
    n = pts.shape[0]
    if not 1 <= m_count <= n:
        raise ValueError(f"m_count must be in [1, {n}], got {m_count}")

    canon = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    centroid = pts[canon].mean(axis=0)
    diff = pts - centroid
    d2c = np.einsum("nc,nc->n", diff, diff)

    selected = np.empty(m_count, dtype=np.int64)
    selected[0] = _argmax_lex(d2c, pts)

    # chosen points are retired with a sentinel below every real squared
    # distance, so the plain argmax never revisits them
    np.subtract(pts, pts[selected[0]], out=diff)
    mind = np.einsum("nc,nc->n", diff, diff)
    mind[selected[0]] = -1.0
    for i in range(1, m_count):
        pick = _argmax_lex(mind, pts)
        selected[i] = pick
        np.subtract(pts, pts[pick], out=diff)
        np.minimum(mind, np.einsum("nc,nc->n", diff, diff), out=mind)
        mind[pick] = -1.0
    return selected


def _as_cloud_batch(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[2] != 3:
        raise ValueError("expected a (B, N, 3) point batch")
    if pts.shape[0] < 1 or pts.shape[1] < 1:
        raise ValueError("empty point batch")
    if not np.isfinite(pts).all():
        raise ValueError("non-finite coordinates")
    return pts


def _pick_rows(values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Row-wise _argmax_lex over a (B, N) value table."""
    picks = np.argmax(values, axis=1)
    vmax = np.take_along_axis(values, picks[:, None], axis=1)
    ties = np.count_nonzero(values == vmax, axis=1)
    for i in np.flatnonzero(ties > 1):
        picks[i] = _argmax_lex(values[i], pts[i])
    return picks


def fps_batch(points, m_count: int) -> np.ndarray:
    """fps over a (B, N, 3) batch; row b equals fps(points[b], m_count).

    Every cloud advances one greedy pick per iteration, so the sequential
    part of the algorithm is paid once per batch instead of once per cloud.
    """
    pts = _as_cloud_batch(points)
    b, n = pts.shape[:2]
    if not 1 <= m_count <= n:
        raise ValueError(f"m_count must be in [1, {n}], got {m_count}")

    diff = np.empty_like(pts)
    for i in range(b):
        canon = np.lexsort((pts[i, :, 2], pts[i, :, 1], pts[i, :, 0]))
        np.subtract(pts[i], pts[i][canon].mean(axis=0), out=diff[i])
    d2c = np.einsum("bnc,bnc->bn", diff, diff)

    rows = np.arange(b)
    selected = np.empty((b, m_count), dtype=np.int64)
    picks = _pick_rows(d2c, pts)
    selected[:, 0] = picks

    np.subtract(pts, pts[rows, picks][:, None, :], out=diff)
    mind = np.einsum("bnc,bnc->bn", diff, diff)
    mind[rows, picks] = -1.0
    d2 = np.empty_like(mind)
    for i in range(1, m_count):
        picks = _pick_rows(mind, pts)
        selected[:, i] = picks
        np.subtract(pts, pts[rows, picks][:, None, :], out=diff)
        np.einsum("bnc,bnc->bn", diff, diff, out=d2)
        np.minimum(mind, d2, out=mind)
        mind[rows, picks] = -1.0
    return selected


def knn(points, centers, k: int) -> PatchIndex:
    """k nearest neighbors of each center within the cloud.

    The center always occupies slot 0 of its row; the remaining slots hold
    the k-1 nearest other points ordered by distance, ties broken by
    lexicographic coordinates and finally by original index.
    """
    pts = _as_cloud(points)
    n = pts.shape[0]
    centers = np.asarray(centers, dtype=np.int64)
    if centers.ndim != 1 or centers.size < 1:
        raise ValueError("centers must be a non-empty index vector")
    if centers.min() < 0 or centers.max() >= n:
        raise ValueError("center index out of range")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")

    m = centers.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    out[:, 0] = centers
    if k > 1:
        diff = pts[centers][:, None, :] - pts[None, :, :]
        d2 = np.einsum("mnc,mnc->mn", diff, diff)
        d2[np.arange(m), centers] = np.inf  # self occupies slot 0 already

        part = np.argpartition(d2, k - 2, axis=1)[:, : k - 1]
        cand_d2 = np.take_along_axis(d2, part, axis=1)

        # distance order alone settles tie-free rows; rows with an equal
        # pair anywhere (inside the candidates, or straddling the partition
        # boundary) fall back to the full coordinate tie-break below
        order = np.argsort(cand_d2, axis=1, kind="stable")
        sd2 = np.take_along_axis(cand_d2, order, axis=1)
        out[:, 1:] = np.take_along_axis(part, order, axis=1)

        kth = sd2[:, -1]
        total_eq = (d2 == kth[:, None]).sum(axis=1)
        cand_eq = (sd2 == kth[:, None]).sum(axis=1)
        inner = (sd2[:, 1:] == sd2[:, :-1]).any(axis=1) if k > 2 else np.zeros(m, bool)
        redo = np.flatnonzero(inner | (total_eq > cand_eq))

        for r in redo:
            full = np.lexsort((np.arange(n), pts[:, 2], pts[:, 1], pts[:, 0], d2[r]))
            out[r, 1:] = full[: k - 1]
    return PatchIndex(centers=centers, neighbors=out, n_points=n)


def knn_neighbors_batch(points, centers, k: int) -> np.ndarray:
    """Neighbor table (B, M, k) for a (B, N, 3) batch with (B, M) centers.

    Row (b, m) equals knn(points[b], centers[b], k).neighbors[m]; this is
    the array core of knn_batch without the per-cloud index wrappers.
    """
    pts = _as_cloud_batch(points)
    b, n = pts.shape[:2]
    centers = np.asarray(centers, dtype=np.int64)
    if centers.ndim != 2 or centers.shape[0] != b or centers.shape[1] < 1:
        raise ValueError("centers must be a (B, M) index table")
    if centers.min() < 0 or centers.max() >= n:
        raise ValueError("center index out of range")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")

    m = centers.shape[1]
    rows = np.arange(b)[:, None]
    out = np.empty((b, m, k), dtype=np.int64)
    out[:, :, 0] = centers
    if k > 1:
        diff = pts[rows, centers][:, :, None, :] - pts[:, None, :, :]
        d2 = np.einsum("bmnc,bmnc->bmn", diff, diff)
        d2[rows, np.arange(m)[None, :], centers] = np.inf

        part = np.argpartition(d2, k - 2, axis=2)[:, :, : k - 1]
        cand_d2 = np.take_along_axis(d2, part, axis=2)
        order = np.argsort(cand_d2, axis=2, kind="stable")
        sd2 = np.take_along_axis(cand_d2, order, axis=2)
        out[:, :, 1:] = np.take_along_axis(part, order, axis=2)

        kth = sd2[:, :, -1]
        total_eq = (d2 == kth[:, :, None]).sum(axis=2)
        cand_eq = (sd2 == kth[:, :, None]).sum(axis=2)
        if k > 2:
            inner = (sd2[:, :, 1:] == sd2[:, :, :-1]).any(axis=2)
        else:
            inner = np.zeros((b, m), dtype=bool)
        for bi, r in np.argwhere(inner | (total_eq > cand_eq)):
            p = pts[bi]
            full = np.lexsort((np.arange(n), p[:, 2], p[:, 1], p[:, 0], d2[bi, r]))
            out[bi, r, 1:] = full[: k - 1]
    return out


def knn_batch(points, centers, k: int) -> list[PatchIndex]:
    """knn over a (B, N, 3) batch with (B, M) centers; entry b equals
    knn(points[b], centers[b], k)."""
    centers = np.asarray(centers, dtype=np.int64)
    neighbors = knn_neighbors_batch(points, centers, k)
    n = np.asarray(points).shape[1]
    return [
        PatchIndex(centers=c, neighbors=nb, n_points=n)
        for c, nb in zip(centers, neighbors)
    ]


def pipeline_geometry(points, n_stages: int, k: int) -> list[tuple]:
    """Center/neighbor tables for every stage of a halving pipeline.

    Sampling and grouping depend only on coordinates, so one pass over a
    (B, N, 3) batch serves every cloud; entry s is the stacked
    (centers (B, m), neighbors (B, m, k)) pair that stage s would compute
    cloud by cloud on its own.
    """
    coords = _as_cloud_batch(points)
    if n_stages < 1:
        raise ValueError("need at least one stage")
    out = []
    for _ in range(n_stages):
        m = coords.shape[1]
        if m % 2:
            raise ValueError("stage input size must be even")
        centers = fps_batch(coords, m // 2)
        out.append((centers, knn_neighbors_batch(coords, centers, k)))
        coords = np.take_along_axis(coords, centers[:, :, None], axis=1)
    return out


def gather_patches(features, patch: PatchIndex) -> np.ndarray:
    """Gather per-point features into (M, k, d) patch blocks."""
    feats = np.asarray(features)
    if feats.ndim != 2:
        raise ValueError("expected an (N, d) feature array")
    if feats.shape[0] != patch.n_points:
        raise ValueError("feature count does not match the parent cloud size")
    return feats[patch.neighbors]
