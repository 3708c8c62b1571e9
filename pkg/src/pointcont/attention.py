"""Content-based self-attention over clustered feature rows.

Rows are grouped by similarity of their *queries* (per head, via balanced
hierarchical clustering), attention runs inside each cluster, and outputs
are merged back in original row order. Two attention kernels are provided:

- scalar: softmax(Q K^T / sqrt(h)) V within the cluster
- vector: per (query, key) channelwise difference (Q_i - K_j) / sqrt(h),
  softmax over keys independently per channel, then channelwise modulation
  of V ("pairwise" reading; the benchmark's aligned accounting variant lives
  in ``bench``)

``attention_type="none"`` keeps the projections and clustering but passes V
through unchanged, which keeps ablation rows structurally comparable.

Row counts that are not cluster_size * 2^t are padded by duplicating the
last row; padded outputs are dropped on merge and their gradients fold back
into the duplicated source row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cluster import METRICS, admissible_size, balanced_cluster_batch
from .nn_core import Affine, LayerNorm, make_activation, softmax_axis, softmax_backward

ATTENTION_TYPES = ("scalar", "vector", "none")
BENCH_VARIANTS = ("local", "pointtrans", "cont")


@dataclass
class AttentionConfig:
    heads: int = 4
    cluster_size: int = 16
    attention_type: str = "vector"
    metric: str = "euclidean"
    use_pre_norm: bool = True
    use_ffn: bool = True
    ffn_expansion: int = 2
    cluster_init: str = "norm"  # "norm" (deterministic) or "random" (seeded)

    def validate(self, d: int) -> None:
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"width {d} not divisible by heads {self.heads}")
        cs = self.cluster_size
        if cs < 1 or (cs & (cs - 1)):
            raise ValueError(f"cluster_size must be a power of two, got {cs}")
        if self.attention_type not in ATTENTION_TYPES:
            raise ValueError(f"unknown attention_type: {self.attention_type}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric: {self.metric}")
        if self.ffn_expansion < 1:
            raise ValueError("ffn_expansion must be >= 1")
        if self.cluster_init not in ("norm", "random"):
            raise ValueError(f"unknown cluster_init: {self.cluster_init}")


def project_qkv(x, wq, wk, wv):
    """Bias-free query/key/value projections."""
    return x @ wq, x @ wk, x @ wv


# ---------------------------------------------------------------------------
# single-cluster reference kernels (batched versions below do the real work)


def scalar_attention(q, k, v) -> np.ndarray:
    """softmax(q k^T / sqrt(h)) v for one cluster, rows (s, h)."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    h = q.shape[1]
    a = softmax_axis(q @ k.T / np.sqrt(h), axis=-1)
    return a @ v


def vector_attention(q, k, v) -> np.ndarray:
    """Channelwise attention: weights softmax_j((q_i - k_j) / sqrt(h)) per channel."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    h = q.shape[1]
    d = (q[:, None, :] - k[None, :, :]) / np.sqrt(h)  # (s, s, h)
    a = softmax_axis(d, axis=1)
    return np.einsum("ijh,jh->ih", a, v)


# batched over clusters: Qc, Kc, Vc are (L, s, h)


def _scalar_fwd(qc, kc, vc):
    inv = 1.0 / np.sqrt(qc.shape[2])
    a = softmax_axis(np.matmul(qc, kc.transpose(0, 2, 1)) * inv, axis=-1)
    return np.matmul(a, vc), (a, qc, kc, vc, inv)


def _scalar_bwd(dy, cache):
    a, qc, kc, vc, inv = cache
    da = np.matmul(dy, vc.transpose(0, 2, 1))
    dvc = np.matmul(a.transpose(0, 2, 1), dy)
    ds = softmax_backward(a, da, axis=-1) * inv
    dqc = np.matmul(ds, kc)
    dkc = np.matmul(ds.transpose(0, 2, 1), qc)
    return dqc, dkc, dvc


def _vector_fwd(qc, kc, vc):
    # softmax_j((q_i - k_j) / sqrt(h)) is shift-invariant in the query term,
    # so every query row of a cluster shares one weight vector per channel;
    # compute it from the keys alone instead of an (s, s, h) pairwise block
    inv = 1.0 / np.sqrt(qc.shape[2])
    a = softmax_axis(kc * -inv, axis=1)  # (L, s, h)
    y = (a * vc).sum(axis=1, keepdims=True)
    return np.broadcast_to(y, vc.shape).copy(), (a, vc, inv)


def _vector_bwd(dy, cache):
    a, vc, inv = cache
    g = dy.sum(axis=1, keepdims=True)  # every row saw the same output
    dvc = a * g
    da = vc * g
    dkc = softmax_backward(a, da, axis=1) * -inv
    return np.zeros_like(dkc), dkc, dvc


def _none_fwd(qc, kc, vc):
    return vc.copy(), None


def _none_bwd(dy, cache):
    z = np.zeros_like(dy)
    return z, z.copy(), dy


_KERNELS = {
    "scalar": (_scalar_fwd, _scalar_bwd),
    "vector": (_vector_fwd, _vector_bwd),
    "none": (_none_fwd, _none_bwd),
}


class ContentAttentionBlock:
    """Pre-norm residual attention block with clustered heads and a small FFN.

    Layout: x + proj(concat_h SA_h(cluster(x))) followed by an optional
    residual pointwise feed-forward. Clustering runs per head on that head's
    query slice; ``last_assignments`` exposes the most recent per-head
    assignments for inspection/visualization.
    """

    def __init__(self, store, name, d, cfg: AttentionConfig, activation="relu", act_slope=0.01):
        cfg.validate(d)
        self.d = d
        self.cfg = cfg
        self.head_dim = d // cfg.heads
        self.wq = store.param(f"{name}.wq", (d, d), fan_in=d)
        self.wk = store.param(f"{name}.wk", (d, d), fan_in=d)
        self.wv = store.param(f"{name}.wv", (d, d), fan_in=d)
        self.wo = store.param(f"{name}.wo", (d, d), fan_in=d)
        self.ln1 = LayerNorm(store, f"{name}.ln1", d) if cfg.use_pre_norm else None
        if cfg.use_ffn:
            e = cfg.ffn_expansion
            self.ln2 = LayerNorm(store, f"{name}.ln2", d)
            self.fc1 = Affine(store, f"{name}.fc1", d, e * d)
            # no bias on the projection back: it would only shift every row
            # by a per-channel constant, which any following batch norm
            # cancels exactly (and a classifier head absorbs into its own
            # bias), leaving a dead parameter
            self.fc2 = Affine(store, f"{name}.fc2", e * d, d, bias=False)
            self.act = make_activation(activation, act_slope)
        else:
            self.ln2 = None
        self.last_assignments = None
        self._cache = None

    def forward(self, x, rng: np.random.Generator | None = None):
        """(S, d) rows or a (B, S, d) batch; batches are processed jointly
        but every sample is clustered and attended independently."""
        single = x.ndim == 2
        if single:
            x = x[None]
        b, s, d = x.shape
        if d != self.d:
            raise ValueError(f"expected width {self.d}, got {d}")
        cfg = self.cfg
        hd = self.head_dim
        nh = cfg.heads
        xn = self.ln1.forward(x) if self.ln1 is not None else x
        q, k, v = project_qkv(xn, self.wq.value, self.wk.value, self.wv.value)

        padded = admissible_size(s, cfg.cluster_size)
        if padded > s:
            # pad by duplicating the last row so every cluster is full
            reps = padded - s
            q = np.concatenate([q, np.repeat(q[:, -1:], reps, axis=1)], axis=1)
            k = np.concatenate([k, np.repeat(k[:, -1:], reps, axis=1)], axis=1)
            v = np.concatenate([v, np.repeat(v[:, -1:], reps, axis=1)], axis=1)
        # (B, P, H, hd) -> (B*H, P, hd) slices, sample-major
        qh = q.reshape(b, padded, nh, hd).transpose(0, 2, 1, 3).reshape(b * nh, padded, hd)
        kh = k.reshape(b, padded, nh, hd).transpose(0, 2, 1, 3).reshape(b * nh, padded, hd)
        vh = v.reshape(b, padded, nh, hd).transpose(0, 2, 1, 3).reshape(b * nh, padded, hd)

        asgs = balanced_cluster_batch(
            qh, cfg.cluster_size, cfg.metric, init=cfg.cluster_init, rng=rng
        )
        # flat per-head list for one cloud, nested per-cloud lists otherwise
        self.last_assignments = (
            asgs if b == 1 else [asgs[i * nh : (i + 1) * nh] for i in range(b)]
        )
        perms = np.stack([a.perm for a in asgs])  # (B*H, rows)
        bi = np.arange(b * nh)[:, None]
        shape = (b * nh * (padded // cfg.cluster_size), cfg.cluster_size, hd)
        fwd, _ = _KERNELS[cfg.attention_type]
        y, kcache = fwd(
            qh[bi, perms].reshape(shape),
            kh[bi, perms].reshape(shape),
            vh[bi, perms].reshape(shape),
        )
        ys = np.empty((b * nh, padded, hd))
        ys[bi, perms] = y.reshape(b * nh, padded, hd)
        y_heads = (
            ys[:, :s].reshape(b, nh, s, hd).transpose(0, 2, 1, 3).reshape(b, s, d)
        )
        attn = y_heads @ self.wo.value
        y1 = x + attn
        if self.ln2 is not None:
            z = self.fc2.forward(self.act.forward(self.fc1.forward(self.ln2.forward(y1))))
            out = y1 + z
        else:
            out = y1
        self._cache = (x, xn, y_heads, perms, kcache, padded, single)
        return out[0] if single else out

    def backward(self, dy):
        x, xn, y_heads, perms, kcache, padded, single = self._cache
        if single:
            dy = dy[None]
        b, s, d = x.shape
        cfg = self.cfg
        hd = self.head_dim
        nh = cfg.heads
        _, bwd = _KERNELS[cfg.attention_type]

        if self.ln2 is not None:
            dz = self.fc1.backward(self.act.backward(self.fc2.backward(dy)))
            dy1 = dy + self.ln2.backward(dz)
        else:
            dy1 = dy
        dx = dy1.copy()

        self.wo.grad += y_heads.reshape(-1, d).T @ dy1.reshape(-1, d)
        dy_heads = dy1 @ self.wo.value.T

        bi = np.arange(b * nh)[:, None]
        dyh = np.zeros((b * nh, padded, hd))
        dyh[:, :s] = (
            dy_heads.reshape(b, s, nh, hd).transpose(0, 2, 1, 3).reshape(b * nh, s, hd)
        )
        shape = (b * nh * (padded // cfg.cluster_size), cfg.cluster_size, hd)
        dqc, dkc, dvc = bwd(dyh[bi, perms].reshape(shape), kcache)

        grads = []
        for src in (dqc, dkc, dvc):
            g = np.empty((b * nh, padded, hd))
            g[bi, perms] = src.reshape(b * nh, padded, hd)
            gp = np.ascontiguousarray(
                g.reshape(b, nh, padded, hd).transpose(0, 2, 1, 3)
            ).reshape(b, padded, d)
            if padded > s:
                # padded rows were copies of the last row
                gp[:, s - 1] += gp[:, s:].sum(axis=1)
            grads.append(gp[:, :s])
        dq, dk, dv = grads

        xnf = xn.reshape(-1, d)
        self.wq.grad += xnf.T @ dq.reshape(-1, d)
        self.wk.grad += xnf.T @ dk.reshape(-1, d)
        self.wv.grad += xnf.T @ dv.reshape(-1, d)
        dxn = dq @ self.wq.value.T + dk @ self.wk.value.T + dv @ self.wv.value.T
        if self.ln1 is not None:
            dx += self.ln1.backward(dxn)
        else:
            dx += dxn
        return (dx[0] if single else dx)


def mac_count(variant: str, s: int, k: int, d: int) -> int:
    """Closed-form multiply-accumulate count for one attention module.

    local:      4*S*k*d^2 + 2*S*k^2*d   (overlapping patch attention)
    pointtrans: 4*S*k*d^2 + 2*S*k*d     (per-point channelwise attention)
    cont:       4*S*d^2   + 2*S*d       (non-overlapping clustered attention)
    """
    if variant not in BENCH_VARIANTS:
        raise ValueError(f"unknown variant: {variant}")
    for name, val in (("s", s), ("k", k), ("d", d)):
        if not isinstance(val, (int, np.integer)) or val < 0:
            raise ValueError(f"{name} must be a non-negative integer")
    if s == 0:
        return 0
    if k < 1 or d < 1:
        raise ValueError("k and d must be positive")
    if variant == "local":
        return 4 * s * k * d * d + 2 * s * k * k * d
    if variant == "pointtrans":
        return 4 * s * k * d * d + 2 * s * k * d
    return 4 * s * d * d + 2 * s * d
