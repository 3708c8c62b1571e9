"""Full classifier, its configuration, and the training loop.

A model is a stack of aggregation stages over a shrinking point set (the
first stage consumes raw coordinates as features, each later stage doubles
the width while halving the point count) followed by a global max-pool and
a two-affine head. Everything is driven by ModelConfig; checkpoints embed
the config as scalar tensors so a saved model file is self-describing.
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import pcnt_io
from .aggregator import Stage
from .attention import ATTENTION_TYPES, AttentionConfig
from .cluster import METRICS
from .data import augment
from .nn_core import Affine, Dropout, ParamStore, make_activation

CLUSTER_INITS = ("norm", "random")
ACTIVATIONS = ("relu", "leaky_relu")


class ConfigError(ValueError):
    """A configuration violates a build constraint; message names it."""


class ConfigParseError(ValueError):
    """A config file is syntactically malformed; message carries the line."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    # architecture
    n_points: int = 1024
    base_width: int = 32
    stages: int = 5
    k: int = 16
    cluster_size: int = 16
    heads: int = 4
    attention_type: str = "vector"
    metric: str = "euclidean"
    num_classes: int = 3
    # branch toggles
    use_max_pool: bool = True
    use_res_mlp: bool = True
    use_avg_pool: bool = True
    use_cont: bool = True
    # block details
    use_pre_norm: bool = True
    use_ffn: bool = True
    ffn_expansion: int = 2
    res_bottleneck: float = 1.0
    activation: str = "relu"
    act_slope: float = 0.01
    head_dropout: float = 0.5
    cluster_init: str = "norm"
    # optimizer / schedule
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    warmup_epochs: int = 10
    epochs: int = 60
    batch_size: int = 16
    label_smoothing: float = 0.1
    # augmentation
    augment: bool = True
    scale_min: float = 0.8
    scale_max: float = 1.2
    translate_max: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.stages >= 1, "stages must be at least 1")
        need(self.n_points >= 2, "n_points must be at least 2")
        need(self.n_points <= 1 << 20, "n_points exceeds the supported size")
        need(
            self.n_points % (1 << self.stages) == 0,
            f"n_points must be divisible by 2^stages ({1 << self.stages})",
        )
        need(self.heads >= 1, "heads must be at least 1")
        need(
            self.base_width % self.heads == 0,
            "base_width must be divisible by heads",
        )
        need(self.cluster_size >= 1, "cluster_size must be at least 1")
        need(
            self.cluster_size & (self.cluster_size - 1) == 0,
            "cluster_size must be a power of two",
        )
        need(
            self.n_points // (1 << self.stages) >= self.cluster_size,
            "n_points / 2^stages must be at least cluster_size",
        )
        need(self.k >= 1, "k must be at least 1")
        need(
            self.k <= self.n_points // (1 << (self.stages - 1)),
            "k exceeds the point count entering the last stage",
        )
        need(self.attention_type in ATTENTION_TYPES, f"attention_type must be one of {ATTENTION_TYPES}")
        need(self.metric in METRICS, f"metric must be one of {METRICS}")
        need(self.cluster_init in CLUSTER_INITS, f"cluster_init must be one of {CLUSTER_INITS}")
        need(self.activation in ACTIVATIONS, f"activation must be one of {ACTIVATIONS}")
        need(self.num_classes >= 2, "num_classes must be at least 2")
        need(
            self.use_max_pool or self.use_avg_pool,
            "at least one of use_max_pool/use_avg_pool must be enabled",
        )
        need(
            self.use_max_pool or not self.use_res_mlp,
            "use_res_mlp requires use_max_pool",
        )
        need(self.ffn_expansion >= 1, "ffn_expansion must be at least 1")
        need(self.res_bottleneck > 0, "res_bottleneck must be positive")
        need(self.act_slope > 0, "act_slope must be positive")
        need(0.0 <= self.head_dropout < 1.0, "head_dropout must be in [0, 1)")
        need(0.0 <= self.label_smoothing < 1.0, "label_smoothing must be in [0, 1)")
        need(self.lr >= 0.0, "lr must be nonnegative")
        need(0.0 <= self.momentum < 1.0, "momentum must be in [0, 1)")
        need(self.weight_decay >= 0.0, "weight_decay must be nonnegative")
        need(self.epochs >= 1, "epochs must be at least 1")
        need(0 <= self.warmup_epochs, "warmup_epochs must be nonnegative")
        need(self.batch_size >= 1, "batch_size must be at least 1")
        need(0.0 < self.scale_min <= self.scale_max, "scale range must satisfy 0 < scale_min <= scale_max")
        need(self.translate_max >= 0.0, "translate_max must be nonnegative")
        need(0 <= self.seed < 1 << 32, "seed must fit in 32 bits")

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            heads=self.heads,
            cluster_size=self.cluster_size,
            attention_type=self.attention_type,
            metric=self.metric,
            use_pre_norm=self.use_pre_norm,
            use_ffn=self.use_ffn,
            ffn_expansion=self.ffn_expansion,
            cluster_init=self.cluster_init,
        )

    def stage_width(self, m: int) -> int:
        """Output width of 1-based stage m."""
        return self.base_width * (1 << (m - 1))


_BOOL_WORDS = {
    "true": True, "1": True, "yes": True, "on": True,
    "false": False, "0": False, "no": False, "off": False,
}


def parse_config_file(path) -> ModelConfig:
    """`key = value` lines; '#' starts a comment; unknown keys rejected."""
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or not key or not val:
                raise ConfigParseError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            if key not in fields:
                raise ConfigParseError(f"line {lineno}: unknown option {key!r}")
            if key in values:
                raise ConfigParseError(f"line {lineno}: duplicate option {key!r}")
            kind = type(fields[key].default)
            try:
                if kind is bool:
                    if val.lower() not in _BOOL_WORDS:
                        raise ValueError
                    values[key] = _BOOL_WORDS[val.lower()]
                elif kind is int:
                    values[key] = int(val)
                elif kind is float:
                    values[key] = float(val)
                else:
                    values[key] = val
            except ValueError:
                raise ConfigParseError(
                    f"line {lineno}: bad {kind.__name__} value {val!r} for {key!r}"
                ) from None
    return ModelConfig(**values)


# ---------------------------------------------------------------------------
# the classifier


class Classifier:
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore(cfg.seed)
        self.stages = []
        d_in = 3
        for m in range(1, cfg.stages + 1):
            d_out = cfg.stage_width(m)
            self.stages.append(
                Stage(
                    self.store,
                    f"stage{m}",
                    d_in,
                    d_out,
                    k=cfg.k,
                    attn_cfg=cfg.attention_config() if cfg.use_cont else None,
                    use_max_pool=cfg.use_max_pool,
                    use_res_mlp=cfg.use_res_mlp,
                    use_avg_pool=cfg.use_avg_pool,
                    use_cont=cfg.use_cont,
                    res_hidden=max(1, round(d_out * cfg.res_bottleneck)),
                    activation=cfg.activation,
                    act_slope=cfg.act_slope,
                )
            )
            d_in = d_out
        self.final_width = d_in
        hidden = max(1, self.final_width // 2)
        self.fc1 = Affine(self.store, "head.fc1", self.final_width, hidden)
        self.act = make_activation(cfg.activation, cfg.act_slope)
        self.drop = Dropout(cfg.head_dropout)
        self.fc2 = Affine(self.store, "head.fc2", hidden, cfg.num_classes)
        self._pool_arg = None

    def forward(
        self,
        points,
        train: bool = False,
        rng: np.random.Generator | None = None,
        geom=None,
    ):
        """Logits for one (n_points, 3) cloud or a (B, n_points, 3) batch.

        Batched clouds run through the same vectorized path but remain
        statistically independent (per-cloud normalization statistics).
        """
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 2
        if single:
            pts = pts[None]
        if pts.ndim != 3 or pts.shape[1:] != (self.cfg.n_points, 3):
            raise ValueError(
                f"expected a ({self.cfg.n_points}, 3) cloud or a batch of them,"
                f" got {pts.shape[1:] if pts.ndim == 3 else pts.shape}"
            )
        if rng is None and not train and self.cfg.cluster_init == "random":
            # inference must stay deterministic: derive a fixed stream per call
            rng = np.random.default_rng([self.cfg.seed, 4])
        coords, feats = pts, pts
        for i, stage in enumerate(self.stages):
            coords, feats = stage.forward(
                coords, feats, train, rng, None if geom is None else geom[i]
            )
        self._pool_arg = feats.argmax(axis=1)  # (B, d) row winners per channel
        self._pool_rows = feats.shape[1]
        self._single = single
        pooled = np.take_along_axis(feats, self._pool_arg[:, None, :], axis=1)
        # the kept singleton row axis turns the head matmuls into stacks of
        # one-row gemms, so logits do not depend on how clouds are batched
        h = self.drop.forward(self.act.forward(self.fc1.forward(pooled)), train, rng)
        logits = self.fc2.forward(h)[:, 0, :]
        return logits[0] if single else logits

    def backward(self, dlogits):
        d = np.asarray(dlogits)
        if self._single:
            d = d[None]
        dh = self.act.backward(self.drop.backward(self.fc2.backward(d[:, None, :])))
        dpooled = self.fc1.backward(dh)
        dfeats = np.zeros((d.shape[0], self._pool_rows, self.final_width))
        np.put_along_axis(dfeats, self._pool_arg[:, None, :], dpooled, axis=1)
        for stage in reversed(self.stages):
            dfeats = stage.backward(dfeats)
        return dfeats[0] if self._single else dfeats

    def predict(self, points) -> int:
        return int(np.argmax(self.forward(points)))

    def gradcheck_filter(self):
        """Excludes parameters whose analytic gradient is identically zero.

        In difference-based (vector) attention the key softmax is invariant
        to the query, so the query projection only steers the discrete
        clustering; with attention off both query and key projections do.
        Finite differences on those coordinates measure pure roundoff.
        """
        if not self.cfg.use_cont or self.cfg.attention_type == "scalar":
            return None
        if self.cfg.attention_type == "vector":
            return lambda name: not name.endswith(".wq")
        return lambda name: not (name.endswith(".wq") or name.endswith(".wk"))


def build_model(cfg: ModelConfig) -> Classifier:
    return Classifier(cfg)


# ---------------------------------------------------------------------------
# loss / optimizer / schedule


def smoothed_cross_entropy(logits, label, smoothing=0.0):
    """Loss and its logit gradient; target mass 1-e on the label, e spread."""
    k = logits.shape[0]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    shifted = logits - logits.max()
    logp = shifted - math.log(np.exp(shifted).sum())
    target = np.full(k, smoothing / k)
    target[label] += 1.0 - smoothing
    loss = float(-(target * logp).sum())
    return loss, np.exp(logp) - target


def smoothed_cross_entropy_batch(logits, labels, smoothing=0.0):
    """Row-wise variant: (b,) losses and (b, k) logit gradients."""
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be (b,) class indices below {k}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = np.full((b, k), smoothing / k)
    target[np.arange(b), labels] += 1.0 - smoothing
    return -(target * logp).sum(axis=1), np.exp(logp) - target


class SGD:
    """Momentum SGD; decay is added to the gradient before the velocity."""

    def __init__(self, store: ParamStore, momentum=0.9, weight_decay=0.0):
        self.store = store
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._vel = {p.name: np.zeros_like(p.value) for p in store.params(trainable_only=True)}

    def step(self, lr: float) -> None:
        for p in self.store.params(trainable_only=True):
            v = self._vel[p.name]
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.value
            p.value -= lr * v


def lr_schedule(base_lr, epoch, total_epochs, warmup_epochs):
    """Linear ramp to base_lr over the warmup, then a cosine decay."""
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    span = max(1, total_epochs - warmup_epochs)
    t = (epoch - warmup_epochs) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def train_step(model, opt, batch_points, batch_labels, lr, rng) -> float:
    """One optimizer step over an already-augmented batch; mean loss back."""
    model.store.zero_grad()
    batch = np.asarray(batch_points, dtype=np.float64)
    logits = model.forward(batch, train=True, rng=rng)
    losses, dlogits = smoothed_cross_entropy_batch(
        logits, np.asarray(batch_labels), model.cfg.label_smoothing
    )
    if not np.isfinite(losses).all():
        raise TrainingDiverged("non-finite loss during training")
    model.backward(dlogits / len(batch))
    opt.step(lr)
    return float(losses.mean())


def train_model(model, points, labels, metrics_path=None, log=None):
    """Full schedule over the dataset; returns per-epoch metric rows.

    RNG discipline: shuffling, augmentation, and the dropout/cluster stream
    are all derived from cfg.seed, so two runs with identical configs and
    data produce bitwise-identical parameters.
    """
    cfg = model.cfg
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = points.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise ValueError("labels must be (n,) class indices below num_classes")
    if points.shape[1:] != (cfg.n_points, 3):
        raise ValueError(
            f"training clouds must be (n, {cfg.n_points}, 3), got {points.shape}"
        )
    if not np.isfinite(points).all():
        raise ValueError("non-finite coordinates in the training set")

    opt = SGD(model.store, cfg.momentum, cfg.weight_decay)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    stream_rng = np.random.default_rng([cfg.seed, 3])
    rows = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.lr, epoch, cfg.epochs, cfg.warmup_epochs)
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            clouds = np.empty((len(batch),) + points.shape[1:], dtype=np.float64)
            for j, idx in enumerate(batch):
                pts = points[idx]
                if cfg.augment:
                    arng = np.random.default_rng([cfg.seed, 2, epoch, int(idx)])
                    pts = augment(pts, arng, cfg.scale_min, cfg.scale_max, cfg.translate_max)
                clouds[j] = pts
            model.store.zero_grad()
            try:
                logits = model.forward(clouds, train=True, rng=stream_rng)
            except ValueError as exc:
                # inputs and shapes were validated up front, so a mid-run
                # failure means activations or parameters left float range
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            losses, dlogits = smoothed_cross_entropy_batch(
                logits, labels[batch], cfg.label_smoothing
            )
            if not np.isfinite(losses).all():
                bad = int(batch[int(np.flatnonzero(~np.isfinite(losses))[0])])
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, sample {bad}")
            model.backward(dlogits / len(batch))
            loss_sum += float(losses.sum())
            correct += int(np.sum(np.argmax(logits, axis=1) == labels[batch]))
            opt.step(lr)
        rows.append((epoch, lr, loss_sum / n, correct / n))
        if log is not None:
            log(
                f"epoch {epoch:3d}  lr {lr:.6f}  loss {loss_sum / n:.4f}  "
                f"acc {correct / n:.4f}"
            )
    if metrics_path is not None:
        write_metrics_csv(metrics_path, rows)
    return rows


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,lr,train_loss,train_acc\n")
        for epoch, lr, loss, acc in rows:
            fh.write(f"{epoch},{lr:.10g},{loss:.6f},{acc:.6f}\n")


# ---------------------------------------------------------------------------
# evaluation


def classification_metrics(preds, labels):
    """(overall accuracy, unweighted mean recall over classes present)."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("predictions and labels must be equal-length and nonempty")
    oa = float(np.mean(preds == labels))
    recalls = [float(np.mean(preds[labels == c] == c)) for c in np.unique(labels)]
    return oa, float(np.mean(recalls))


def evaluate(model, points, labels, batch_size: int = 64):
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        raise ValueError("empty evaluation set")
    preds = np.empty(points.shape[0], dtype=np.int64)
    for lo in range(0, points.shape[0], batch_size):
        logits = model.forward(points[lo : lo + batch_size])
        preds[lo : lo + batch_size] = np.argmax(logits, axis=1)
    return classification_metrics(preds, labels)


# ---------------------------------------------------------------------------
# checkpoints (parameters + the config, all in one tensor file)

_ENUM_FIELDS = {
    "attention_type": ATTENTION_TYPES,
    "metric": METRICS,
    "cluster_init": CLUSTER_INITS,
    "activation": ACTIVATIONS,
}


def _config_tensors(cfg: ModelConfig) -> dict:
    out = {}
    for f in dataclasses.fields(ModelConfig):
        v = getattr(cfg, f.name)
        if f.name == "seed":
            # two 16-bit halves stay exact in the float32 container
            out["cfg.seed_hi"] = np.float64(v >> 16)
            out["cfg.seed_lo"] = np.float64(v & 0xFFFF)
        elif f.name in _ENUM_FIELDS:
            out[f"cfg.{f.name}"] = np.float64(_ENUM_FIELDS[f.name].index(v))
        else:
            out[f"cfg.{f.name}"] = np.float64(v)
    return out


def _config_from_tensors(tensors) -> ModelConfig:
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name == "seed":
            keys = ("cfg.seed_hi", "cfg.seed_lo")
        else:
            keys = (f"cfg.{f.name}",)
        for key in keys:
            if key not in tensors:
                raise pcnt_io.PcntError(f"checkpoint is missing '{key}'")
        if f.name == "seed":
            hi = int(round(float(tensors["cfg.seed_hi"])))
            lo = int(round(float(tensors["cfg.seed_lo"])))
            kwargs["seed"] = (hi << 16) | lo
            continue
        raw = float(tensors[f"cfg.{f.name}"])
        if f.name in _ENUM_FIELDS:
            options = _ENUM_FIELDS[f.name]
            idx = int(round(raw))
            if not 0 <= idx < len(options):
                raise pcnt_io.PcntError(f"checkpoint has invalid 'cfg.{f.name}'")
            kwargs[f.name] = options[idx]
        elif isinstance(f.default, bool):
            kwargs[f.name] = bool(round(raw))
        elif isinstance(f.default, int):
            kwargs[f.name] = int(round(raw))
        else:
            kwargs[f.name] = raw
    return ModelConfig(**kwargs)


def save_checkpoint(model: Classifier, path) -> None:
    tensors = {p.name: p.value for p in model.store.params()}
    tensors.update(_config_tensors(model.cfg))
    pcnt_io.write_tensors(path, tensors)


def load_model(path) -> Classifier:
    tensors = pcnt_io.read_tensors(path)
    model = Classifier(_config_from_tensors(tensors))
    for p in model.store.params():
        if p.name not in tensors:
            raise pcnt_io.PcntError(f"checkpoint is missing tensor '{p.name}'")
        t = tensors[p.name]
        if tuple(t.shape) != tuple(p.value.shape):
            raise pcnt_io.PcntError(
                f"shape mismatch for '{p.name}': file {t.shape} vs model {p.value.shape}"
            )
        p.value[...] = t.astype(np.float64)
    return model
