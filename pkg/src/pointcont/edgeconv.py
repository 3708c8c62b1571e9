"""Edge features over kNN patches: concat(center, neighbor - center) -> MLP."""

from __future__ import annotations

import numpy as np

from .nn_core import SharedMLP


def edge_features(center_feats, neighbor_feats) -> np.ndarray:
    """Build (..., k, 2d) edge blocks from (..., d) centers and (..., k, d) neighbors.

    Channels 0..d-1 carry the center feature broadcast over the patch,
    channels d..2d-1 the neighbor offsets relative to the center. Leading
    axes beyond the patch table (e.g. a batch axis) pass through.
    """
    cf = np.asarray(center_feats)
    nf = np.asarray(neighbor_feats)
    if (
        nf.ndim != cf.ndim + 1
        or cf.ndim < 2
        or nf.shape[: cf.ndim - 1] != cf.shape[:-1]
        or nf.shape[-1] != cf.shape[-1]
    ):
        raise ValueError("expected (..., d) centers and (..., k, d) neighbors")
    k = nf.shape[-2]
    tiled = np.repeat(cf[..., None, :], k, axis=-2)
    return np.concatenate([tiled, nf - tiled], axis=-1)


def edge_features_backward(dedge):
    """Gradients of edge_features: returns (dcenter (..., d), dneighbor (..., k, d))."""
    d = dedge.shape[-1] // 2
    dcenter = dedge[..., :d].sum(axis=-2) - dedge[..., d:].sum(axis=-2)
    dneighbor = dedge[..., d:].copy()
    return dcenter, dneighbor


class EdgeConv:
    """Pointwise MLP over edge features; output width set by the caller.

    The first affine is applied in factored form: with the weight split into
    a center half and an offset half, concat(c, n - c) @ W equals
    c @ W_top + (n - c) @ W_bot, and the center product needs only one row
    per patch instead of k copies. Values match the materialized edge block
    up to roundoff.
    """

    def __init__(self, store, name, d_in, d_out, activation="relu", act_slope=0.01):
        self.mlp = SharedMLP(store, f"{name}.mlp", 2 * d_in, d_out, activation, act_slope)
        self.d_in, self.d_out = d_in, d_out
        self._cache = None

    def forward(self, center_feats, neighbor_feats, train: bool, batched: bool = False):
        cf = np.asarray(center_feats, dtype=np.float64)
        nf = np.asarray(neighbor_feats, dtype=np.float64)
        if (
            nf.ndim != cf.ndim + 1
            or cf.ndim < 2
            or nf.shape[: cf.ndim - 1] != cf.shape[:-1]
            or nf.shape[-1] != cf.shape[-1]
        ):
            raise ValueError("expected (..., d) centers and (..., k, d) neighbors")
        w = self.mlp.lin.w.value
        off = nf - cf[..., None, :]
        pre = cf @ w[: self.d_in]
        pre = pre[..., None, :] + off @ w[self.d_in :]
        self._cache = (cf, off)
        return self.mlp.normalize(pre, train, batched)

    def backward(self, dy):
        cf, off = self._cache
        w = self.mlp.lin.w.value
        wg = self.mlp.lin.w.grad
        dpre = self.mlp.normalize_backward(dy)
        dsum = dpre.sum(axis=-2)
        wg[: self.d_in] += cf.reshape(-1, self.d_in).T @ dsum.reshape(-1, self.d_out)
        wg[self.d_in :] += off.reshape(-1, self.d_in).T @ dpre.reshape(-1, self.d_out)
        doff = dpre @ w[self.d_in :].T
        dcenter = dsum @ w[: self.d_in].T - doff.sum(axis=-2)
        return dcenter, doff
