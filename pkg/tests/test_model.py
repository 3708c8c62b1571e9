"""Config handling, the assembled classifier, loss/optimizer, checkpoints."""

import numpy as np
import pytest

from pointcont import pcnt_io
from pointcont.data import synth_toy
from pointcont.geometry import pipeline_geometry
from pointcont.model import (
    Classifier,
    ConfigError,
    ConfigParseError,
    ModelConfig,
    SGD,
    build_model,
    classification_metrics,
    evaluate,
    load_model,
    lr_schedule,
    parse_config_file,
    save_checkpoint,
    smoothed_cross_entropy,
    train_model,
    train_step,
)
from pointcont.nn_core import gradcheck


def mini_cfg(**kw):
    base = dict(
        n_points=64,
        base_width=8,
        stages=3,
        k=8,
        cluster_size=4,
        heads=2,
        attention_type="scalar",
        head_dropout=0.0,
        epochs=2,
        warmup_epochs=1,
        batch_size=4,
        seed=1,
    )
    base.update(kw)
    return ModelConfig(**base)


def _cloud(seed, n=64):
    return np.random.default_rng(seed).normal(size=(n, 3))


# ---------------------------------------------------------------------------
# config


def test_default_config_is_valid():
    ModelConfig().validate()


@pytest.mark.parametrize(
    "kw",
    [
        dict(n_points=100),  # not divisible by 2^stages
        dict(n_points=256),  # 256/32 < cluster_size 16
        dict(base_width=30),  # not divisible by heads
        dict(cluster_size=12),
        dict(heads=0),
        dict(stages=0),
        dict(k=0),
        dict(k=4096),
        dict(attention_type="linear"),
        dict(metric="manhattan"),
        dict(cluster_init="kmeans"),
        dict(activation="gelu"),
        dict(num_classes=1),
        dict(use_max_pool=False, use_avg_pool=False),
        dict(use_max_pool=False, use_res_mlp=True),
        dict(head_dropout=1.0),
        dict(label_smoothing=-0.1),
        dict(momentum=1.0),
        dict(epochs=0),
        dict(batch_size=0),
        dict(scale_min=1.5, scale_max=1.2),
        dict(seed=1 << 32),
    ],
)
def test_config_rejects_bad_values(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw).validate()


def test_stage_width_rule():
    cfg = ModelConfig()
    assert [cfg.stage_width(m) for m in range(1, 6)] == [32, 64, 128, 256, 512]


def test_parse_config_file_round_trip(tmp_path):
    p = tmp_path / "train.cfg"
    p.write_text(
        "# toy run\n"
        "n_points = 256\n"
        "base_width = 16\n"
        "stages = 4\n"
        "attention_type = vector\n"
        "use_ffn = false\n"
        "lr = 0.002  # inline comment\n"
        "seed = 42\n",
        encoding="utf-8",
    )
    cfg = parse_config_file(p)
    assert cfg.n_points == 256
    assert cfg.base_width == 16
    assert cfg.stages == 4
    assert cfg.attention_type == "vector"
    assert cfg.use_ffn is False
    assert cfg.lr == 0.002
    assert cfg.seed == 42
    assert cfg.heads == 4  # untouched default


@pytest.mark.parametrize(
    "text,frag",
    [
        ("points = 64\n", "unknown option"),
        ("n_points 64\n", "expected"),
        ("n_points = 64\nn_points = 128\n", "duplicate"),
        ("n_points = many\n", "bad int"),
        ("use_ffn = maybe\n", "bad bool"),
        ("lr = fast\n", "bad float"),
    ],
)
def test_parse_config_file_errors(tmp_path, text, frag):
    p = tmp_path / "bad.cfg"
    p.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigParseError, match=frag):
        parse_config_file(p)


def test_parse_config_error_carries_line_number(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("n_points = 64\n\nbogus = 1\n", encoding="utf-8")
    with pytest.raises(ConfigParseError, match="line 3"):
        parse_config_file(p)


# ---------------------------------------------------------------------------
# build / forward


def test_default_build_head_dimensions():
    model = build_model(ModelConfig())
    assert model.final_width == 512
    assert model.fc1.w.value.shape == (512, 256)
    assert model.fc2.w.value.shape == (256, 3)


def test_three_stage_width():
    model = build_model(ModelConfig(n_points=1024, stages=3, base_width=32))
    assert model.final_width == 128


def test_identical_seeds_identical_parameters():
    a = Classifier(mini_cfg())
    b = Classifier(mini_cfg())
    for pa, pb in zip(a.store.params(), b.store.params()):
        assert pa.name == pb.name
        assert np.array_equal(pa.value, pb.value)
    c = Classifier(mini_cfg(seed=2))
    assert not np.array_equal(a.fc1.w.value, c.fc1.w.value)


def test_forward_shapes_and_validation():
    model = Classifier(mini_cfg())
    logits = model.forward(_cloud(0))
    assert logits.shape == (3,)
    assert np.isfinite(logits).all()
    with pytest.raises(ValueError):
        model.forward(np.zeros((32, 3)))


def test_degenerate_identical_point_cloud():
    model = Classifier(mini_cfg())
    logits = model.forward(np.full((64, 3), 0.5))
    assert np.isfinite(logits).all()


def test_eval_forward_is_side_effect_free():
    model = Classifier(mini_cfg())
    cloud = _cloud(1)
    a = model.forward(cloud)
    b = model.forward(cloud)
    assert np.array_equal(a, b)


def test_permutation_invariance():
    model = Classifier(mini_cfg())
    cloud, _ = synth_toy(1, 64, 0.02, seed=3)
    base = model.forward(cloud[0])
    rng = np.random.default_rng(4)
    for _ in range(5):
        perm = rng.permutation(64)
        out = model.forward(cloud[0][perm])
        assert int(np.argmax(out)) == int(np.argmax(base))
        assert np.abs(out - base).max() < 1e-10


def test_precomputed_geometry_forward_is_bitwise_identical():
    model = Classifier(mini_cfg())
    cloud = _cloud(9)
    geom = pipeline_geometry(cloud[None], model.cfg.stages, model.cfg.k)
    plain = model.forward(cloud)
    assert np.array_equal(model.forward(cloud, geom=geom), plain)
    with pytest.raises(ValueError):
        model.forward(cloud, geom=list(reversed(geom)))  # stage size mismatch


def test_train_mode_dropout_needs_rng():
    model = Classifier(mini_cfg(head_dropout=0.5))
    with pytest.raises(ValueError):
        model.forward(_cloud(5), train=True)
    out = model.forward(_cloud(5), train=True, rng=np.random.default_rng(0))
    assert np.isfinite(out).all()


@pytest.mark.parametrize("attn", ["scalar", "vector", "none"])
def test_end_to_end_gradcheck(attn):
    model = Classifier(mini_cfg(attention_type=attn))
    cloud = _cloud(6)
    r = np.random.default_rng(7).normal(size=3)

    def run(want):
        logits = model.forward(cloud, train=True)
        if want:
            model.backward(r)
        return float((logits * r).sum())

    worst = gradcheck(
        run, model.store, probes=250, eps=1e-5, param_filter=model.gradcheck_filter()
    )
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# loss / schedule / optimizer


def test_cross_entropy_uniform_logits():
    loss, dlogits = smoothed_cross_entropy(np.zeros(3), 1, smoothing=0.0)
    assert abs(loss - np.log(3.0)) < 1e-12
    assert np.allclose(dlogits, [1 / 3, -2 / 3, 1 / 3], atol=1e-12)


def test_cross_entropy_matches_manual_smoothed_form():
    logits = np.array([2.0, -1.0, 0.5])
    eps = 0.3
    loss, dlogits = smoothed_cross_entropy(logits, 0, smoothing=eps)
    p = np.exp(logits) / np.exp(logits).sum()
    target = np.array([1 - eps + eps / 3, eps / 3, eps / 3])
    assert abs(loss - -(target * np.log(p)).sum()) < 1e-12
    assert np.allclose(dlogits, p - target, atol=1e-12)
    assert abs(dlogits.sum()) < 1e-12


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        smoothed_cross_entropy(np.zeros(3), 3)


def test_lr_schedule_shape():
    lrs = [lr_schedule(0.1, e, 20, 5) for e in range(20)]
    assert np.allclose(lrs[:5], [0.02, 0.04, 0.06, 0.08, 0.1])
    assert lrs[5] == 0.1  # cosine starts at full rate
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))  # decaying
    assert lrs[-1] < 0.01
    assert lr_schedule(0.1, 0, 10, 0) == 0.1  # no warmup


def test_sgd_step_hand_values():
    from pointcont.nn_core import ParamStore

    store = ParamStore(0)
    p = store.param("w", (2,), init="zeros")
    p.value[...] = [1.0, -2.0]
    opt = SGD(store, momentum=0.5, weight_decay=0.1)
    p.grad[...] = [0.3, 0.0]
    opt.step(1.0)
    # v = 0.5*0 + g + wd*w = [0.4, -0.2]; w -= v
    assert np.allclose(p.value, [0.6, -1.8], atol=1e-15)
    p.grad[...] = [0.0, 0.0]
    opt.step(1.0)
    # v = 0.5*[0.4,-0.2] + wd*w = [0.26, -0.28]
    assert np.allclose(p.value, [0.34, -1.52], atol=1e-15)


def test_zero_lr_step_only_touches_bn_stats():
    model = Classifier(mini_cfg())
    opt = SGD(model.store, 0.9, 1e-4)
    before = {p.name: p.value.copy() for p in model.store.params()}
    train_step(model, opt, [_cloud(8)], [0], lr=0.0, rng=np.random.default_rng(0))
    for p in model.store.params():
        if p.trainable:
            assert np.array_equal(p.value, before[p.name]), p.name
    changed = [
        p.name for p in model.store.params() if not p.trainable
        and not np.array_equal(p.value, before[p.name])
    ]
    assert changed  # running statistics moved


def test_single_sample_overfit():
    cfg = mini_cfg(label_smoothing=0.0, augment=False, lr=0.01, warmup_epochs=0)
    model = Classifier(cfg)
    opt = SGD(model.store, cfg.momentum, cfg.weight_decay)
    cloud = _cloud(9)
    rng = np.random.default_rng(0)
    loss = None
    for _ in range(200):
        loss = train_step(model, opt, [cloud], [2], lr=cfg.lr, rng=rng)
    assert loss < 0.1


# ---------------------------------------------------------------------------
# training loop / evaluation


def test_train_model_runs_and_writes_metrics(tmp_path):
    clouds, labels = synth_toy(4, 64, 0.02, seed=10)
    model = Classifier(mini_cfg())
    path = tmp_path / "metrics.csv"
    rows = train_model(model, clouds, labels, metrics_path=path)
    assert len(rows) == 2
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,train_acc"
    assert len(lines) == 3
    assert lines[1].startswith("0,")


def test_train_model_is_bitwise_deterministic():
    clouds, labels = synth_toy(3, 64, 0.02, seed=11)

    def run():
        model = Classifier(mini_cfg())
        train_model(model, clouds, labels)
        return {p.name: p.value.copy() for p in model.store.params()}

    a, b = run(), run()
    assert a.keys() == b.keys()
    for name in a:
        assert np.array_equal(a[name], b[name]), name


def test_train_model_validates_labels():
    clouds, _ = synth_toy(2, 64, 0.02, seed=12)
    model = Classifier(mini_cfg())
    with pytest.raises(ValueError):
        train_model(model, clouds, np.full(len(clouds), 7))


def test_classification_metrics_cases():
    assert classification_metrics([0, 1, 2], [0, 1, 2]) == (1.0, 1.0)
    labels = [0, 1, 2] * 4
    oa, macc = classification_metrics([0] * 12, labels)
    assert abs(oa - 1 / 3) < 1e-12 and abs(macc - 1 / 3) < 1e-12
    # recalls 1.0, 0.5, 0.0 with very different class sizes -> mean 0.5
    labels = [0] * 8 + [1] * 2 + [2] * 4
    preds = [0] * 8 + [1, 0] + [1] * 4
    oa, macc = classification_metrics(preds, labels)
    assert abs(macc - 0.5) < 1e-12
    with pytest.raises(ValueError):
        classification_metrics([], [])


def test_evaluate_end_to_end():
    clouds, labels = synth_toy(2, 64, 0.02, seed=13)
    model = Classifier(mini_cfg())
    oa, macc = evaluate(model, clouds, labels)
    assert 0.0 <= oa <= 1.0 and 0.0 <= macc <= 1.0
    # chunking must not change anything: inference is per-sample independent
    assert evaluate(model, clouds, labels, batch_size=1) == (oa, macc)


def test_batched_inference_matches_single_forwards():
    model = Classifier(mini_cfg(attention_type="vector"))
    clouds = np.stack([_cloud(seed) for seed in (3, 4, 5, 6)])
    batch = model.forward(clouds)
    singles = np.stack([model.forward(c) for c in clouds])
    assert np.array_equal(batch, singles)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    cfg = mini_cfg(seed=0xDEADBEEF, attention_type="vector", use_ffn=False)
    model = Classifier(cfg)
    path = tmp_path / "model.pcnt"
    save_checkpoint(model, path)
    loaded = load_model(path)
    assert loaded.cfg.seed == 0xDEADBEEF
    assert loaded.cfg.attention_type == "vector"
    assert loaded.cfg.use_ffn is False
    assert loaded.cfg.n_points == 64
    assert loaded.cfg.lr == pytest.approx(cfg.lr, rel=1e-6)  # float32 storage
    cloud = _cloud(14)
    assert np.abs(loaded.forward(cloud) - model.forward(cloud)).max() < 1e-4


def test_checkpoint_bitwise_stable(tmp_path):
    model = Classifier(mini_cfg())
    a, b = tmp_path / "a.pcnt", tmp_path / "b.pcnt"
    save_checkpoint(model, a)
    save_checkpoint(model, b)
    assert a.read_bytes() == b.read_bytes()


def test_load_model_missing_tensor(tmp_path):
    model = Classifier(mini_cfg())
    path = tmp_path / "model.pcnt"
    save_checkpoint(model, path)
    tensors = pcnt_io.read_tensors(path)
    del tensors["head.fc2.w"]
    pcnt_io.write_tensors(path, tensors)
    with pytest.raises(pcnt_io.PcntError, match="head.fc2.w"):
        load_model(path)
