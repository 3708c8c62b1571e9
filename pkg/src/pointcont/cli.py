"""Command line driver: data synthesis, training, evaluation, export, timing.

Every subcommand is a thin wrapper over the library modules. Outputs are
files (PCNT tensor containers, checkpoints, CSV, ASCII PLY) or stdout lines
meant to be parsed by scripts. Failures produce a single machine-parseable
``error: <label>: <message>`` line on stderr and a distinct exit code, listed
in ``--help``. All randomness is seeded, so reruns with the same arguments
reproduce output files byte for byte (timing measurements excepted).
"""

from __future__ import annotations

import argparse
import colorsys
import sys
from pathlib import Path

import numpy as np

from . import bench
from .aggregator import Stage
from .attention import AttentionConfig, ContentAttentionBlock
from .data import (
    TOY_CLASSES,
    OffParseError,
    load_dataset,
    load_off,
    normalize_unit_sphere,
    sample_n,
    save_dataset,
    synth_toy,
    write_ply,
)
from .edgeconv import EdgeConv
from .model import (
    Classifier,
    ConfigError,
    ConfigParseError,
    ModelConfig,
    TrainingDiverged,
    evaluate,
    load_model,
    parse_config_file,
    save_checkpoint,
    train_model,
)
from .nn_core import (
    Affine,
    BatchNorm,
    LayerNorm,
    ParamStore,
    ResMLP,
    SharedMLP,
    gradcheck,
)
from .pcnt_io import PcntError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_PARSE = 4
EXIT_CONSTRAINT = 5
EXIT_DIVERGED = 6

_EPILOG = """\
exit codes:
  0  success
  1  unexpected internal failure
  2  usage error (unknown command, flag, or malformed argument)
  3  missing or unreadable input file
  4  malformed input (OFF mesh, config file, or PCNT tensor container)
  5  constraint violation (invalid configuration or out-of-range request)
  6  training diverged (non-finite loss)
"""


def _fail(code: int, label: str, message: str) -> int:
    print(f"error: {label}: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# argument helpers


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}"
        ) from None
    if not values:
        raise argparse.ArgumentTypeError("empty integer list")
    return values


def _name_list(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    if not names:
        raise argparse.ArgumentTypeError("empty name list")
    return names


# ---------------------------------------------------------------------------
# cluster export palette


def cluster_palette(n: int) -> np.ndarray:
    """(n, 3) uint8 rows, pairwise distinct, deterministic in the index.

    Hues advance by the golden-ratio step so nearby ids stay far apart on
    the color wheel; on the rare quantization collision the value channel
    is nudged until the RGB triple is unused.
    """
    if n < 1:
        raise ValueError("palette needs at least one color")
    colors = np.empty((n, 3), dtype=np.uint8)
    seen = set()
    for i in range(n):
        hue = (i * 0.6180339887498949) % 1.0
        rgb = None
        for attempt in range(256):
            value = 0.95 - 0.003 * attempt
            cand = tuple(
                int(round(255.0 * c)) for c in colorsys.hsv_to_rgb(hue, 0.72, value)
            )
            if cand not in seen:
                rgb = cand
                break
        if rgb is None:  # pragma: no cover - 256 value steps per hue
            raise RuntimeError("palette exhausted")
        seen.add(rgb)
        colors[i] = rgb
    return colors


def _load_cloud(path, n_points: int, seed: int) -> np.ndarray:
    """OFF vertices resampled to the model's input size, on the unit sphere."""
    return normalize_unit_sphere(sample_n(load_off(path), n_points, seed))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_toy(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = (
        ("train.pcnt", args.per_class, args.seed),
        ("test.pcnt", args.test_per_class, args.seed + 1),
    )
    for name, per_class, seed in splits:
        points, labels = synth_toy(per_class, args.points, args.noise, seed)
        save_dataset(out / name, points, labels)
        print(f"wrote {out / name} ({labels.shape[0]} clouds)")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = parse_config_file(args.config)
    points, labels = load_dataset(Path(args.data) / "train.pcnt")
    model = Classifier(cfg)
    metrics = args.metrics or str(Path(args.out).with_suffix(".metrics.csv"))
    train_model(model, points, labels, metrics_path=metrics, log=print)
    save_checkpoint(model, args.out)
    print(f"checkpoint {args.out}")
    print(f"metrics {metrics}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    points, labels = load_dataset(Path(args.data) / f"{args.split}.pcnt")
    oa, macc = evaluate(model, points, labels)
    print(f"OA {oa:.4f}")
    print(f"mAcc {macc:.4f}")
    return EXIT_OK


def _cmd_classify(args) -> int:
    model = load_model(args.model)
    cloud = _load_cloud(args.input, model.cfg.n_points, args.seed)
    logits = model.forward(cloud)
    pred = int(np.argmax(logits))
    name = TOY_CLASSES[pred] if model.cfg.num_classes == len(TOY_CLASSES) else str(pred)
    print(f"class {name}")
    print("logits " + " ".join(f"{v:.6f}" for v in logits))
    return EXIT_OK


def _cmd_clusters(args) -> int:
    model = load_model(args.model)
    n_stages = len(model.stages)
    if not 1 <= args.stage <= n_stages:
        raise ValueError(f"--stage must be in 1..{n_stages} for this model")
    cloud = _load_cloud(args.input, model.cfg.n_points, args.seed)
    model.forward(cloud)  # a single-cloud pass populates stage diagnostics
    stage = model.stages[args.stage - 1]
    if stage.cont is None:
        raise ValueError(f"stage {args.stage} has no clustered-attention branch")
    heads = stage.cont.last_assignments
    if not 0 <= args.head < len(heads):
        raise ValueError(f"--head must be in 0..{len(heads) - 1}")
    assignment = heads[args.head]
    coords = cloud
    for st in model.stages[: args.stage]:
        coords = coords[st.last_patch.centers]
    # rows past the true point count are duplication padding; drop them
    labels = assignment.labels()[: coords.shape[0]]
    colors = cluster_palette(assignment.n_clusters)[labels]
    write_ply(args.out, coords, colors)
    print(
        f"wrote {args.out} ({assignment.n_clusters} clusters"
        f" over {coords.shape[0]} points)"
    )
    return EXIT_OK


def _cmd_bench(args) -> int:
    reports = bench.sweep(
        args.variants,
        args.s,
        args.k,
        args.d,
        args.repeats,
        max_elements=args.max_elements,
        exclude_clustering=args.exclude_clustering,
        parallel=args.parallel,
    )
    text = bench.reports_to_csv(reports)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out} ({len(reports)} rows)")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradient audit


def _grad_cases(full: bool):
    """Named (builder, probes, filter) triples covering every trainable op.

    Each builder returns (store, run) where run(want_grad) evaluates a fixed
    weighted-sum loss and, on demand, accumulates analytic gradients.
    """
    g = np.random.default_rng
    quick = 0 if full else 48

    def scalar_loss(y, r):
        return float((y * r).sum())

    def affine():
        store = ParamStore(seed=0)
        op = Affine(store, "op", 6, 5)
        x, r = g(1).normal(size=(7, 6)), g(2).normal(size=(7, 5))

        def run(want):
            y = op.forward(x)
            if want:
                op.backward(r)
            return scalar_loss(y, r)

        return store, run

    def batchnorm():
        store = ParamStore(seed=0)
        op = BatchNorm(store, "op", 5)
        x, r = g(3).normal(size=(9, 4, 5)), g(4).normal(size=(9, 4, 5))

        def run(want):
            y = op.forward(x, train=True)
            if want:
                op.backward(r)
            return scalar_loss(y, r)

        return store, run

    def layernorm():
        store = ParamStore(seed=0)
        op = LayerNorm(store, "op", 6)
        x, r = g(5).normal(size=(8, 6)), g(6).normal(size=(8, 6))

        def run(want):
            y = op.forward(x)
            if want:
                op.backward(r)
            return scalar_loss(y, r)

        return store, run

    def shared_mlp():
        store = ParamStore(seed=0)
        op = SharedMLP(store, "op", 5, 7)
        x, r = g(7).normal(size=(9, 5)), g(8).normal(size=(9, 7))

        def run(want):
            y = op.forward(x, train=True)
            if want:
                op.backward(r)
            return scalar_loss(y, r)

        return store, run

    def res_mlp():
        store = ParamStore(seed=0)
        op = ResMLP(store, "op", 6, 4)
        x, r = g(9).normal(size=(8, 6)), g(10).normal(size=(8, 6))

        def run(want):
            y = op.forward(x, train=True)
            if want:
                op.backward(r)
            return scalar_loss(y, r)

        return store, run

    def edgeconv():
        store = ParamStore(seed=0)
        op = EdgeConv(store, "op", 4, 6)
        cf = g(11).normal(size=(5, 4))
        nf = g(12).normal(size=(5, 3, 4))
        r = g(13).normal(size=(5, 3, 6))

        def run(want):
            y = op.forward(cf, nf, train=True)
            if want:
                op.backward(r)
            return scalar_loss(y, r)

        return store, run

    def attention(kind):
        def build():
            store = ParamStore(seed=0)
            op = ContentAttentionBlock(
                store,
                "op",
                8,
                AttentionConfig(heads=2, cluster_size=4, attention_type=kind),
            )
            x, r = g(14).normal(size=(16, 8)), g(15).normal(size=(16, 8))

            def run(want):
                y = op.forward(x)
                if want:
                    op.backward(r)
                return scalar_loss(y, r)

            return store, run

        return build

    def stage():
        store = ParamStore(seed=0)
        op = Stage(
            store,
            "op",
            3,
            8,
            k=4,
            attn_cfg=AttentionConfig(heads=2, cluster_size=4),
        )
        coords = g(16).normal(size=(16, 3))
        r = g(17).normal(size=(8, 8))

        def run(want):
            _, out = op.forward(coords, coords, train=True)
            if want:
                op.backward(r)
            return scalar_loss(out, r)

        return store, run

    def classifier():
        cfg = ModelConfig(
            n_points=64,
            base_width=8,
            stages=3,
            k=8,
            cluster_size=4,
            heads=2,
            attention_type="vector",
            num_classes=3,
            head_dropout=0.0,
            seed=1,
        )
        model = Classifier(cfg)
        cloud = normalize_unit_sphere(g(18).normal(size=(64, 3)))
        r = g(19).normal(size=3)

        def run(want):
            logits = model.forward(cloud, train=True)
            if want:
                model.backward(r)
            return scalar_loss(logits, r)

        return model.store, run, model.gradcheck_filter()

    drop_q = lambda name: not name.endswith(".wq")
    drop_qk = lambda name: not name.endswith((".wq", ".wk"))
    cases = [
        ("affine", affine, quick, None),
        ("batchnorm", batchnorm, quick, None),
        ("layernorm", layernorm, quick, None),
        ("shared_mlp", shared_mlp, quick, None),
        ("res_mlp", res_mlp, quick, None),
        ("edgeconv", edgeconv, quick, None),
        ("attention_scalar", attention("scalar"), quick, None),
        ("attention_vector", attention("vector"), quick, drop_q),
        ("attention_none", attention("none"), quick, drop_qk),
        ("stage", stage, quick, None),
        ("classifier", classifier, 300 if full else 80, "own"),
    ]
    return cases


def _cmd_gradcheck(args) -> int:
    results = []
    for name, build, probes, filt in _grad_cases(args.full):
        built = build()
        if filt == "own":  # the model supplies its zero-gradient exclusions
            store, run, filt = built
        else:
            store, run = built
        worst = gradcheck(
            run,
            store,
            probes=probes or 10**9,
            eps=args.eps,
            param_filter=filt,
        )
        results.append((name, worst))
        print(f"{name:<18} {worst:.3e}")
    name, worst = max(results, key=lambda item: item[1])
    print(f"worst {worst:.3e} ({name}); tolerance {args.tol:g}")
    if worst > args.tol:
        return _fail(
            EXIT_CONSTRAINT,
            "constraint violation",
            f"gradient check failed: {name} at {worst:.3e} exceeds {args.tol:g}",
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointcont",
        description="point-cloud classifier with content-clustered attention",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser(
        "gen-toy",
        help="synthesize the three-class toy dataset (spheres, cubes, tori)",
    )
    p.add_argument("--out", required=True, help="directory for train.pcnt / test.pcnt")
    p.add_argument("--per-class", type=_positive_int, default=200, help="training clouds per class")
    p.add_argument("--test-per-class", type=_positive_int, default=50, help="test clouds per class")
    p.add_argument("--points", type=_positive_int, default=256, help="points per cloud")
    p.add_argument("--noise", type=float, default=0.02, help="surface noise sigma")
    p.add_argument("--seed", type=int, default=42, help="train split seed; test uses seed+1")
    p.set_defaults(func=_cmd_gen_toy)

    p = sub.add_parser("train", help="train a classifier on a PCNT dataset")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--data", required=True, help="dataset directory (uses train.pcnt)")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--metrics", help="per-epoch CSV path (default: <out>.metrics.csv)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="print overall and mean per-class accuracy")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("classify", help="classify a single OFF mesh")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--input", required=True, help="OFF mesh to classify")
    p.add_argument("--seed", type=int, default=0, help="vertex resampling seed")
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser(
        "clusters",
        help="export one stage's attention clusters as a colored ASCII PLY",
    )
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--input", required=True, help="OFF mesh to run through the model")
    p.add_argument("--stage", type=int, required=True, help="stage number, 1-based")
    p.add_argument("--head", type=int, default=0, help="attention head, 0-based")
    p.add_argument("--out", required=True, help="PLY path to write")
    p.add_argument("--seed", type=int, default=0, help="vertex resampling seed")
    p.set_defaults(func=_cmd_clusters)

    p = sub.add_parser(
        "bench",
        help="attention cost benchmark: counted multiply-accumulates + timing",
        description=(
            "Runs the attention cost benchmark over a grid and prints CSV. "
            "Counted and predicted MAC columns are deterministic; the "
            "ns_median column is a wall-clock measurement and varies run to run."
        ),
    )
    p.add_argument(
        "--variants",
        type=_name_list,
        default=list(bench.BENCH_VARIANTS),
        help="comma-separated subset of: " + ",".join(bench.BENCH_VARIANTS),
    )
    p.add_argument("--s", type=_int_list, default=[256, 1024, 4096], help="point counts")
    p.add_argument("--k", type=_int_list, default=[8, 16, 32], help="neighborhood / cluster sizes")
    p.add_argument("--d", type=_int_list, default=[32, 64, 128], help="channel widths")
    p.add_argument("--repeats", type=_positive_int, default=5, help="timed repetitions per cell")
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.add_argument(
        "--exclude-clustering",
        action="store_true",
        help="reuse a precomputed clustering so timing covers attention only",
    )
    p.add_argument("--parallel", action="store_true", help="run grid cells concurrently")
    p.add_argument(
        "--max-elements",
        type=_positive_int,
        default=bench.DEFAULT_MAX_ELEMENTS,
        help="refuse cells whose buffers exceed this many array elements",
    )
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser(
        "gradcheck",
        help="finite-difference audit of every trainable op; prints worst error per op",
    )
    p.add_argument("--full", action="store_true", help="probe every parameter coordinate")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="worst relative error allowed")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed its message
        return EXIT_OK if exc.code in (0, None) else int(exc.code)
    try:
        # divergence is detected by explicit finite checks, so the float
        # overflow warnings preceding it are pure noise on stderr
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError) as exc:
        return _fail(EXIT_MISSING, "missing file", str(exc))
    except (OffParseError, ConfigParseError, PcntError) as exc:
        return _fail(EXIT_PARSE, "parse error", str(exc))
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, "training diverged", str(exc))
    except (ConfigError, ValueError) as exc:
        return _fail(EXIT_CONSTRAINT, "constraint violation", str(exc))
    except Exception as exc:  # keep the one-line error contract no matter what
        return _fail(EXIT_INTERNAL, "internal error", f"{type(exc).__name__}: {exc}")


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
