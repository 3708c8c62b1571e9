"""Downsample-and-aggregate stage.

Each stage halves the point count and rebuilds features at the surviving
points: farthest-point sampling picks the centers, kNN (in 3D space, never
feature space) forms overlapping patches, an edge MLP lifts
concat(center, neighbor - center) to the stage width, and two pooling
branches summarize each patch. The max branch (optionally followed by a
residual MLP) keeps sharp local detail; the average branch (optionally
followed by the clustered attention block) smooths and mixes globally.
When both branches run their outputs are concatenated and fused by a
pointwise MLP back to the stage width; a single active branch is passed
through unfused, and attention with the average branch disabled runs
serially after the max branch instead.
"""

import numpy as np

from .attention import AttentionConfig, ContentAttentionBlock
from .edgeconv import EdgeConv
from .geometry import PatchIndex, fps_batch, knn_neighbors_batch
from .nn_core import (
    ResMLP,
    SharedMLP,
    avg_pool_patch,
    avg_pool_patch_backward,
    max_pool_argmax,
    max_pool_patch_backward,
)


class Stage:
    """One aggregation stage: (M, 3) coords + (M, d_in) feats -> halved set.

    ``last_high`` / ``last_low`` hold the most recent branch outputs (the
    high value is taken before a serially-placed attention block) and
    ``last_patch`` the most recent patch index, for inspection and export.
    """

    def __init__(
        self,
        store,
        name,
        d_in,
        d_out,
        *,
        k,
        attn_cfg: AttentionConfig | None = None,
        use_max_pool=True,
        use_res_mlp=True,
        use_avg_pool=True,
        use_cont=True,
        res_hidden=None,
        activation="relu",
        act_slope=0.01,
    ):
        if use_res_mlp and not use_max_pool:
            raise ValueError("residual MLP requires the max-pool branch")
        if not (use_max_pool or use_avg_pool):
            raise ValueError("at least one pooling branch must be enabled")
        if use_cont and attn_cfg is None:
            raise ValueError("attention enabled but no attention config given")
        self.d_in = d_in
        self.d_out = d_out
        self.k = k
        self.use_max_pool = use_max_pool
        self.use_avg_pool = use_avg_pool
        self.serial_cont = use_cont and not use_avg_pool
        self.edge = EdgeConv(store, f"{name}.edge", d_in, d_out, activation, act_slope)
        self.res = (
            ResMLP(store, f"{name}.res", d_out, res_hidden or d_out, activation, act_slope)
            if use_res_mlp
            else None
        )
        self.cont = (
            ContentAttentionBlock(store, f"{name}.cont", d_out, attn_cfg, activation, act_slope)
            if use_cont
            else None
        )
        self.fuse = (
            SharedMLP(store, f"{name}.fuse", 2 * d_out, d_out, activation, act_slope)
            if use_max_pool and use_avg_pool
            else None
        )
        self.last_patch = None
        self.last_high = None
        self.last_low = None
        self._cache = None

    def forward(
        self,
        coords,
        feats,
        train: bool,
        rng: np.random.Generator | None = None,
        geom=None,
    ):
        """Returns (coords_out, feats_out) with M/2 rows and d_out channels.

        Accepts one cloud ((M, 3) + (M, d_in)) or a batch with a leading
        axis; batches share the vectorized path but every cloud is sampled,
        normalized, and attended independently. ``geom`` may carry the
        precomputed (centers, neighbors) tables for these coordinates (see
        geometry.pipeline_geometry); otherwise they are computed here.
        """
        single = coords.ndim == 2
        if single:
            coords = coords[None]
            feats = feats[None]
        b, m_in = coords.shape[:2]
        if m_in % 2:
            raise ValueError("stage input size must be even")
        if feats.shape != (b, m_in, self.d_in):
            raise ValueError(
                f"expected features of shape ({m_in}, {self.d_in}), got {feats.shape[1:]}"
            )
        if geom is None:
            centers = fps_batch(coords, m_in // 2)
            neighbors = knn_neighbors_batch(coords, centers, self.k)
        else:
            centers, neighbors = geom
            if centers.shape != (b, m_in // 2) or neighbors.shape != (b, m_in // 2, self.k):
                raise ValueError("precomputed geometry does not match this stage input")
        bi = np.arange(b)[:, None]
        f_g = self.edge.forward(
            feats[bi, centers], feats[bi[..., None], neighbors], train, batched=True
        )

        high = low = amax = None
        if self.use_max_pool:
            amax = max_pool_argmax(f_g)
            high = np.take_along_axis(f_g, amax[..., None, :], axis=-2)[..., 0, :]
            if self.res is not None:
                high = self.res.forward(high, train, batched=True)
        if self.use_avg_pool:
            low = avg_pool_patch(f_g)
            if self.cont is not None:
                low = self.cont.forward(low, rng)
        # diagnostics are exposed squeezed whenever there is just one cloud
        if b == 1:
            self.last_patch = PatchIndex(centers[0], neighbors[0], m_in)
            self.last_high = None if high is None else high[0]
            self.last_low = None if low is None else low[0]
        else:
            self.last_patch = self.last_high = self.last_low = None

        if self.fuse is not None:
            out = self.fuse.forward(
                np.concatenate([high, low], axis=-1), train, batched=True
            )
        elif self.use_max_pool:
            out = self.cont.forward(high, rng) if self.serial_cont else high
        else:
            out = low
        self._cache = (neighbors, centers, amax, m_in, single)
        coords_out = coords[bi, centers]
        return (coords_out[0], out[0]) if single else (coords_out, out)

    def backward(self, dout):
        """Upstream (M/2, d_out) gradient -> (M, d_in) input-feature gradient."""
        neighbors, centers, amax, m_in, single = self._cache
        if single:
            dout = dout[None]
        b = neighbors.shape[0]
        if self.fuse is not None:
            dcat = self.fuse.backward(dout)
            dhigh, dlow = dcat[..., : self.d_out], dcat[..., self.d_out :]
        elif self.use_max_pool:
            dhigh, dlow = dout, None
        else:
            dhigh, dlow = None, dout

        df_g = np.zeros((b, centers.shape[1], self.k, self.d_out))
        if self.use_avg_pool:
            if self.cont is not None:
                dlow = self.cont.backward(dlow)
            df_g += avg_pool_patch_backward(dlow, self.k)
        if self.use_max_pool:
            if self.serial_cont:
                dhigh = self.cont.backward(dhigh)
            if self.res is not None:
                dhigh = self.res.backward(dhigh)
            df_g += max_pool_patch_backward(dhigh, amax, self.k)

        dcenter, dneighbor = self.edge.backward(df_g)
        # scatter through flat per-batch row indices; center rows are
        # distinct within a cloud, so a plain fancy add suffices there
        offs = (np.arange(b) * m_in)[:, None, None]
        dflat = np.zeros((b * m_in, self.d_in))
        np.add.at(
            dflat, (neighbors + offs).reshape(-1), dneighbor.reshape(-1, self.d_in)
        )
        dflat[(centers + offs[..., 0]).reshape(-1)] += dcenter.reshape(-1, self.d_in)
        dfeats = dflat.reshape(b, m_in, self.d_in)
        return dfeats[0] if single else dfeats
