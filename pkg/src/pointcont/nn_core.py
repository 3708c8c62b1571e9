"""Parameter store, hand-written differentiable layers, and gradient checking.

There is no general autodiff tape. Every layer caches exactly what its own
backward pass needs and accumulates parameter gradients into the shared
store. All math runs in float64; checkpoints serialize to float32 (see
``pcnt_io``). Discrete selections (pooling argmax, sampling, clustering
indices) are treated as constants by the backward passes.
"""

from __future__ import annotations

import numpy as np

from . import pcnt_io


class GradcheckError(RuntimeError):
    """Raised when analytic gradients are unusable (non-finite)."""


class Param:
    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.trainable = trainable

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape}, trainable={self.trainable})"


class ParamStore:
    """Named float64 tensors with matching gradient buffers.

    Construction order is preserved, which fixes both the initialization
    stream and the checkpoint layout; identical seeds therefore give
    bitwise-identical parameters and saved files.
    """

    def __init__(self, seed: int = 0):
        self._params: dict[str, Param] = {}
        self._init_rng = np.random.default_rng(seed)

    def param(self, name, shape, init="fan_in_uniform", fan_in=None, trainable=True) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if init == "fan_in_uniform":
            if not fan_in or fan_in < 1:
                raise ValueError("fan_in_uniform init needs a positive fan_in")
            bound = 1.0 / np.sqrt(fan_in)
            value = self._init_rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            value = np.zeros(shape)
        elif init == "ones":
            value = np.ones(shape)
        else:
            raise ValueError(f"unknown init: {init}")
        p = Param(name, np.asarray(value, dtype=np.float64), trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name) -> Param:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def params(self, trainable_only=False):
        for p in self._params.values():
            if trainable_only and not p.trainable:
                continue
            yield p

    def zero_grad(self):
        for p in self._params.values():
            p.grad[...] = 0.0

    def n_scalars(self, trainable_only=False) -> int:
        return sum(p.value.size for p in self.params(trainable_only))

    def save(self, path):
        pcnt_io.write_tensors(path, {p.name: p.value for p in self.params()})

    def load(self, path):
        tensors = pcnt_io.read_tensors(path)
        for p in self.params():
            if p.name not in tensors:
                raise pcnt_io.PcntError(f"checkpoint is missing tensor '{p.name}'")
            t = tensors[p.name]
            if tuple(t.shape) != tuple(p.value.shape):
                raise pcnt_io.PcntError(
                    f"shape mismatch for '{p.name}': file {t.shape} vs model {p.value.shape}"
                )
            p.value[...] = t.astype(np.float64)


# ---------------------------------------------------------------------------
# activations


class ReLU:
    def __init__(self, slope: float = 0.0):
        # slope > 0 gives the leaky variant
        self.slope = float(slope)
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        if self.slope == 0.0:
            return np.where(self._mask, x, 0.0)
        return np.where(self._mask, x, self.slope * x)

    def backward(self, dy):
        if self.slope == 0.0:
            return np.where(self._mask, dy, 0.0)
        return np.where(self._mask, dy, self.slope * dy)


def make_activation(kind: str, slope: float = 0.01) -> ReLU:
    if kind == "relu":
        return ReLU(0.0)
    if kind == "leaky_relu":
        return ReLU(slope)
    raise ValueError(f"unknown activation: {kind}")


# ---------------------------------------------------------------------------
# parameterized layers


class Affine:
    """y = x @ W + b over the last axis."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias=True):
        self.w = store.param(f"{name}.w", (d_in, d_out), fan_in=d_in)
        self.b = store.param(f"{name}.b", (d_out,), init="zeros") if bias else None
        self.d_in, self.d_out = d_in, d_out
        self._x = None

    def forward(self, x):
        self._x = x
        y = x @ self.w.value
        if self.b is not None:
            y = y + self.b.value
        return y

    def backward(self, dy):
        xf = self._x.reshape(-1, self.d_in)
        dyf = dy.reshape(-1, self.d_out)
        self.w.grad += xf.T @ dyf
        if self.b is not None:
            self.b.grad += dyf.sum(axis=0)
        return dy @ self.w.value.T


class BatchNorm:
    """Per-channel normalization over every leading position.

    Train mode normalizes with batch statistics and updates the running
    estimates (biased variance for normalization, unbiased for the running
    buffer, matching the usual convention). Eval mode uses the running
    buffers, which start at mean 0 / var 1.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.scale = store.param(f"{name}.scale", (channels,), init="ones")
        self.shift = store.param(f"{name}.shift", (channels,), init="zeros")
        self.run_mean = store.param(f"{name}.run_mean", (channels,), init="zeros", trainable=False)
        self.run_var = store.param(f"{name}.run_var", (channels,), init="ones", trainable=False)
        self.channels = channels
        self._cache = None

    def forward(self, x, train: bool, batched: bool = False):
        """``batched`` treats axis 0 as independent samples: statistics are
        taken per sample over the remaining leading axes, exactly as if each
        slice had been normalized on its own."""
        c = self.channels
        axes = tuple(range(1 if batched else 0, x.ndim - 1))
        if train:
            mu = x.mean(axis=axes, keepdims=True)
            var = x.var(axis=axes, keepdims=True)
            inv = 1.0 / np.sqrt(var + self.EPS)
            xhat = (x - mu) * inv
            n = 1
            for a in axes:
                n *= x.shape[a]
            unbiased = var * n / (n - 1) if n > 1 else var
            m = self.MOMENTUM
            rm, rv = self.run_mean.value, self.run_var.value
            if batched:
                # the running buffers advance once per sample, in batch
                # order; the recurrence r <- (1-m) r + m s_i unrolls to a
                # weighted sum, which costs one pass instead of a loop
                b = x.shape[0]
                w = m * (1 - m) ** np.arange(b - 1, -1, -1.0)[:, None]
                rm[...] = (1 - m) ** b * rm + (w * mu.reshape(b, c)).sum(axis=0)
                rv[...] = (1 - m) ** b * rv + (w * unbiased.reshape(b, c)).sum(axis=0)
            else:
                rm[...] = (1 - m) * rm + m * mu.reshape(c)
                rv[...] = (1 - m) * rv + m * unbiased.reshape(c)
        else:
            n = 0
            inv = 1.0 / np.sqrt(self.run_var.value + self.EPS)
            xhat = (x - self.run_mean.value) * inv
        self._cache = (xhat, inv, train, axes, n)
        return self.scale.value * xhat + self.shift.value

    def backward(self, dy):
        xhat, inv, train, axes, n = self._cache
        c = self.channels
        dyf = dy.reshape(-1, c)
        self.scale.grad += (dyf * xhat.reshape(-1, c)).sum(axis=0)
        self.shift.grad += dyf.sum(axis=0)
        dxhat = dy * self.scale.value
        if not train:
            return dxhat * inv
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = (inv / n) * (n * dxhat - s1 - xhat * s2)
        return dx


class LayerNorm:
    """Per-row normalization over the last axis with learnable scale/shift."""

    EPS = 1e-5

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.scale = store.param(f"{name}.scale", (channels,), init="ones")
        self.shift = store.param(f"{name}.shift", (channels,), init="zeros")
        self.channels = channels
        self._cache = None

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.EPS)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return self.scale.value * xhat + self.shift.value

    def backward(self, dy):
        xhat, inv = self._cache
        d = self.channels
        dyf = dy.reshape(-1, d)
        xhatf = xhat.reshape(-1, d)
        self.scale.grad += (dyf * xhatf).sum(axis=0)
        self.shift.grad += dyf.sum(axis=0)
        dxhat = dy * self.scale.value
        s1 = dxhat.mean(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - s1 - xhat * s2)


class SharedMLP:
    """One pointwise affine + batch norm + activation layer, any leading shape.

    The affine carries no bias: batch norm cancels constant channel shifts,
    so a bias there would be a dead parameter with an exactly-zero gradient.
    """

    def __init__(self, store, name, d_in, d_out, activation="relu", act_slope=0.01):
        self.lin = Affine(store, f"{name}.lin", d_in, d_out, bias=False)
        self.bn = BatchNorm(store, f"{name}.bn", d_out)
        self.act = make_activation(activation, act_slope)

    def forward(self, x, train: bool, batched: bool = False):
        return self.normalize(self.lin.forward(x), train, batched)

    def backward(self, dy):
        return self.lin.backward(self.normalize_backward(dy))

    def normalize(self, y, train: bool, batched: bool = False):
        """Just the norm + activation tail, for callers that apply the
        affine themselves (e.g. in a factored form)."""
        return self.act.forward(self.bn.forward(y, train, batched))

    def normalize_backward(self, dy):
        return self.bn.backward(self.act.backward(dy))


class ResMLP:
    """Residual pointwise block: x + mlp2(mlp1(x)), bottleneck width inside."""

    def __init__(self, store, name, d, hidden, activation="relu", act_slope=0.01):
        self.l1 = SharedMLP(store, f"{name}.l1", d, hidden, activation, act_slope)
        self.l2 = SharedMLP(store, f"{name}.l2", hidden, d, activation, act_slope)

    def forward(self, x, train: bool, batched: bool = False):
        return x + self.l2.forward(self.l1.forward(x, train, batched), train, batched)

    def backward(self, dy):
        return dy + self.l1.backward(self.l2.backward(dy))


class Dropout:
    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self._mask = None

    def forward(self, x, train: bool, rng: np.random.Generator | None = None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in train mode needs an RNG")
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


# ---------------------------------------------------------------------------
# stateless op pairs (caller keeps the cache)


def max_pool_patch(block):
    """(..., k, d) -> (..., d) channelwise max over the patch axis."""
    _check_block(block)
    return block.max(axis=-2)


def max_pool_argmax(block):
    # first occurrence wins on ties, i.e. the lowest patch slot
    return block.argmax(axis=-2)


def max_pool_patch_backward(dpooled, argmax, k):
    dblock = np.zeros(dpooled.shape[:-1] + (k, dpooled.shape[-1]), dtype=dpooled.dtype)
    np.put_along_axis(dblock, argmax[..., None, :], dpooled[..., None, :], axis=-2)
    return dblock


def avg_pool_patch(block):
    """(..., k, d) -> (..., d) channelwise mean over the patch axis."""
    _check_block(block)
    return block.mean(axis=-2)


def avg_pool_patch_backward(dpooled, k):
    return np.repeat(dpooled[..., None, :], k, axis=-2) / k


def _check_block(block):
    if np.asarray(block).ndim < 3:
        raise ValueError("expected a (..., k, d) block")


def softmax_axis(x, axis=-1):
    """Numerically stabilized softmax along the given axis."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y, dy, axis=-1):
    """Backward through softmax given its output y and upstream dy."""
    inner = (dy * y).sum(axis=axis, keepdims=True)
    return y * (dy - inner)


# ---------------------------------------------------------------------------
# finite-difference gradient verification


def gradcheck(run, store: ParamStore, probes=200, eps=1e-5, seed=0, param_filter=None):
    """Compare analytic parameter gradients against central differences.

    ``run(want_grad)`` must return a scalar loss; when ``want_grad`` is true
    it must also accumulate gradients into the store (which is zeroed here
    first). Probes are drawn uniformly over all trainable coordinates.
    Returns the worst relative error, |fd - an| / max(|fd|, |an|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    store.zero_grad()
    run(True)

    params = [p for p in store.params(trainable_only=True)]
    if param_filter is not None:
        params = [p for p in params if param_filter(p.name)]
    analytic = {p.name: p.grad.copy() for p in params}
    for name, g in analytic.items():
        if not np.isfinite(g).all():
            raise GradcheckError(f"non-finite analytic gradient in '{name}'")

    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    if probes >= total:
        flat = np.arange(total)
    else:
        flat = rng.choice(total, size=probes, replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for f in flat:
        pi = int(np.searchsorted(bounds, f, side="right"))
        idx = int(f - (bounds[pi - 1] if pi else 0))
        p = params[pi]
        v0 = p.value.flat[idx]
        p.value.flat[idx] = v0 + eps
        fp = run(False)
        p.value.flat[idx] = v0 - eps
        fm = run(False)
        p.value.flat[idx] = v0
        fd = (fp - fm) / (2.0 * eps)
        an = analytic[p.name].flat[idx]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, rel)
    return worst
