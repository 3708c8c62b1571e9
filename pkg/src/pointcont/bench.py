"""Arithmetic-cost validation for the three attention layouts.

Each variant runs on random data in an instrumented mode that tallies the
multiply-accumulates of exactly the operations the closed forms model
(QKV/output projections plus attention-weight and weighted-sum arithmetic),
so ``mac_count`` can be checked against what actually executed. Softmax
exponentials/normalizations and clustering work are tallied separately as
overhead: the closed forms do not model them, and folding them in would
fake agreement.

Wall-clock numbers are medians over repeated calls; input generation sits
outside the timed region, and every large tensor lives in scratch buffers
allocated up front so the timings measure the arithmetic rather than the
allocator (repeated multi-megabyte mallocs cost more in page faults than
the math at desk scale). BLAS pools are pinned to one thread during a run
for timing stability. For the clustered variant the clustering itself is
timed by default (it is part of the real cost of that layout) and can be
excluded with a flag.
"""

from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import BENCH_VARIANTS, mac_count
from .cluster import CostCounter, balanced_cluster

# peak-tensor element cap; ~1 GiB of float64 per tensor
DEFAULT_MAX_ELEMENTS = 1 << 27

CSV_HEADER = "variant,S,k,d,macs_predicted,macs_counted,overhead_macs,ns_median"


@dataclass(frozen=True)
class BenchReport:
    variant: str
    s: int
    k: int
    d: int
    macs_predicted: int
    macs_counted: int
    overhead_macs: int
    ns_median: int
    repeats: int


class MacTally:
    """Modeled MACs in ``macs``; everything else lands in ``overhead``."""

    def __init__(self):
        self.macs = 0
        self.overhead = CostCounter()


def _softmax_inplace(x, axis, mx, sums, tally):
    """Stabilized softmax over ``axis``, overwriting x with the weights."""
    if tally is not None:
        tally.overhead.exps += x.size
        tally.overhead.divs += x.size
    np.max(x, axis=axis, keepdims=True, out=mx)
    np.subtract(x, mx, out=x)
    np.exp(x, out=x)
    np.sum(x, axis=axis, keepdims=True, out=sums)
    np.divide(x, sums, out=x)


def _scratch(variant, s, k, d):
    e = np.empty
    if variant == "local":
        return {
            "patches": e((s, k, d)), "q": e((s, k, d)), "key": e((s, k, d)),
            "v": e((s, k, d)), "scores": e((s, k, k)), "mx": e((s, k, 1)),
            "sums": e((s, k, 1)), "ctx": e((s, k, d)), "y": e((s, k, d)),
        }
    if variant == "pointtrans":
        return {
            "patches": e((s, k, d)), "q": e((s, k, d)), "key": e((s, k, d)),
            "v": e((s, k, d)), "vo": e((s, k, d)), "pre": e((s, k, d)),
            "mx": e((s, 1, d)), "sums": e((s, 1, d)), "y": e((s, d)),
        }
    g = s // k
    return {
        "q": e((s, d)), "key": e((s, d)), "v": e((s, d)), "kc": e((g, k, d)),
        "vc": e((g, k, d)), "mx": e((g, 1, d)), "sums": e((g, 1, d)),
        "yc": e((g, 1, d)), "ys": e((s, d)), "y": e((s, d)),
    }


def _run_local(x, idx, w, buf, tally):
    """Patch-wise scalar attention: every point attends over its k patch rows.

    The closed form prices the four projections per patch row (patches
    overlap, so the same point is projected k times); the execution mirrors
    that accounting, output projection included, before reducing the patch.
    """
    s, d = x.shape
    k = idx.shape[1]
    wq, wk, wv, wo = w
    patches = buf["patches"]
    np.take(x, idx, axis=0, out=patches)
    np.matmul(patches, wq, out=buf["q"])
    np.matmul(patches, wk, out=buf["key"])
    np.matmul(patches, wv, out=buf["v"])
    scores = buf["scores"]
    np.matmul(buf["q"], buf["key"].transpose(0, 2, 1), out=scores)
    scores *= 1.0 / np.sqrt(d)
    if tally is not None:
        tally.macs += 3 * s * k * d * d  # QKV on S*k rows
        tally.macs += s * k * k * d  # QK^T
        tally.overhead.muls += s * k * k  # the 1/sqrt(d) scaling
    _softmax_inplace(scores, -1, buf["mx"], buf["sums"], tally)
    np.matmul(scores, buf["v"], out=buf["ctx"])
    np.matmul(buf["ctx"], wo, out=buf["y"])
    if tally is not None:
        tally.macs += s * k * k * d  # weighted sum
        tally.macs += s * k * d * d  # output projection per patch row
    return buf["y"][:, 0]


def _run_pointtrans(x, idx, w, buf, tally):
    """Per-point channelwise attention over k neighbors.

    Weights come from center-minus-neighbor query/key differences, one
    weight per neighbor per channel; values carry the output projection
    before the weighted reduction so all four projections act on patch rows,
    matching the closed form's accounting.
    """
    s, d = x.shape
    k = idx.shape[1]
    wq, wk, wv, wo = w
    patches = buf["patches"]
    np.take(x, idx, axis=0, out=patches)
    np.matmul(patches, wq, out=buf["q"])
    np.matmul(patches, wk, out=buf["key"])
    np.matmul(patches, wv, out=buf["v"])
    np.matmul(buf["v"], wo, out=buf["vo"])
    pre = buf["pre"]
    np.subtract(buf["q"][:, :1], buf["key"], out=pre)  # center query vs keys
    pre *= 1.0 / np.sqrt(d)
    if tally is not None:
        tally.macs += 4 * s * k * d * d
        tally.macs += s * k * d  # weight arithmetic
    _softmax_inplace(pre, 1, buf["mx"], buf["sums"], tally)
    np.multiply(pre, buf["vo"], out=pre)
    np.sum(pre, axis=1, out=buf["y"])
    if tally is not None:
        tally.macs += s * k * d  # weighted sum
    return buf["y"]


def _run_cont(x, cluster_size, w, buf, tally, assignment=None):
    """Clustered channelwise attention: project once, attend inside clusters."""
    s, d = x.shape
    wq, wk, wv, wo = w
    np.matmul(x, wq, out=buf["q"])
    np.matmul(x, wk, out=buf["key"])
    np.matmul(x, wv, out=buf["v"])
    if tally is not None:
        tally.macs += 3 * s * d * d
    if assignment is None:
        counter = tally.overhead if tally is not None else None
        assignment = balanced_cluster(buf["q"], cluster_size, counter=counter)
    perm = assignment.perm
    kc, vc = buf["kc"], buf["vc"]
    np.take(buf["key"], perm, axis=0, out=kc.reshape(s, d))
    np.take(buf["v"], perm, axis=0, out=vc.reshape(s, d))
    kc *= -1.0 / np.sqrt(d)  # key-only weight logits (see attention kernel)
    if tally is not None:
        tally.macs += s * d  # weight arithmetic
    _softmax_inplace(kc, 1, buf["mx"], buf["sums"], tally)
    np.multiply(kc, vc, out=vc)
    np.sum(vc, axis=1, keepdims=True, out=buf["yc"])
    if tally is not None:
        tally.macs += s * d  # weighted sum
    np.copyto(kc, buf["yc"])  # every row of a cluster shares the result
    buf["ys"][perm] = kc.reshape(s, d)
    np.matmul(buf["ys"], wo, out=buf["y"])
    if tally is not None:
        tally.macs += s * d * d
    return buf["y"]


def _peak_elements(variant, s, k, d):
    if variant == "local":
        return max(s * k * d, s * k * k)
    if variant == "pointtrans":
        return s * k * d
    return s * d


def _validate(variant, s, k, d, repeats, max_elements):
    if variant not in BENCH_VARIANTS:
        raise ValueError(f"unknown variant: {variant}")
    for name, val in (("S", s), ("k", k), ("d", d)):
        if not isinstance(val, (int, np.integer)) or val < 1:
            raise ValueError(f"{name} must be a positive integer")
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    peak = _peak_elements(variant, s, k, d)
    if peak > max_elements:
        raise ValueError(
            f"configuration needs ~{peak} tensor elements, over the cap of "
            f"{max_elements}; raise max_elements to force it"
        )
    if variant == "cont":
        if s % k:
            raise ValueError("cont needs S divisible by k (k is the cluster size)")
        n = s // k
        if n & (n - 1):
            raise ValueError("cont needs S / k to be a power of two")


def run_bench(
    variant: str,
    s: int,
    k: int,
    d: int,
    repeats: int = 5,
    *,
    max_elements: int = DEFAULT_MAX_ELEMENTS,
    exclude_clustering: bool = False,
    seed: int = 9,
    single_thread: bool = True,
) -> BenchReport:
    """Execute one attention variant, counting MACs and timing the body.

    For the clustered variant ``k`` doubles as the cluster size, so every
    variant attends over groups of k rows and the comparison is
    like-for-like. Timing repeats rerun the same scratch-buffer body; the
    median is reported in nanoseconds.
    """
    _validate(variant, s, k, d, repeats, max_elements)
    rng = np.random.default_rng([seed, s, k, d, BENCH_VARIANTS.index(variant)])
    x = rng.normal(size=(s, d))
    scale = 1.0 / np.sqrt(d)
    w = tuple(rng.normal(size=(d, d)) * scale for _ in range(4))
    buf = _scratch(variant, s, k, d)

    if variant == "cont":
        fixed = balanced_cluster(x @ w[0], k) if exclude_clustering else None
        body = lambda tally: _run_cont(x, k, w, buf, tally, assignment=fixed)
    else:
        idx = rng.integers(0, s, size=(s, k))
        idx[:, 0] = np.arange(s)  # patches include their own center
        runner = _run_local if variant == "local" else _run_pointtrans
        body = lambda tally: runner(x, idx, w, buf, tally)

    with threadpool_limits(limits=1 if single_thread else None):
        tally = MacTally()  # counted pass doubles as the warmup
        body(tally)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            body(None)
            times.append(time.perf_counter_ns() - t0)
    return BenchReport(
        variant=variant,
        s=s,
        k=k,
        d=d,
        macs_predicted=mac_count(variant, s, k, d),
        macs_counted=tally.macs,
        overhead_macs=tally.overhead.total(),
        ns_median=int(statistics.median(times)),
        repeats=repeats,
    )


def sweep(
    variants,
    s_values,
    k_values,
    d_values,
    repeats: int = 5,
    *,
    max_elements: int = DEFAULT_MAX_ELEMENTS,
    exclude_clustering: bool = False,
    parallel: bool = False,
) -> list[BenchReport]:
    """Cartesian product of run_bench calls, one report per grid cell.

    ``parallel`` fans cells out over a thread pool; it exists for coarse
    exploration only, since concurrent cells disturb each other's timing.
    Acceptance numbers always come from the default sequential mode.
    """
    variants, s_values = list(variants), list(s_values)
    k_values, d_values = list(k_values), list(d_values)
    if not (variants and s_values and k_values and d_values):
        raise ValueError("every grid axis needs at least one value")
    cells = list(product(variants, s_values, k_values, d_values))
    run = lambda cell: run_bench(
        *cell,
        repeats=repeats,
        max_elements=max_elements,
        exclude_clustering=exclude_clustering,
        single_thread=not parallel,
    )
    if parallel:
        with ThreadPoolExecutor() as pool:
            return list(pool.map(run, cells))
    return [run(cell) for cell in cells]


def reports_to_csv(reports) -> str:
    lines = [CSV_HEADER]
    for r in reports:
        lines.append(
            f"{r.variant},{r.s},{r.k},{r.d},"
            f"{r.macs_predicted},{r.macs_counted},{r.overhead_macs},{r.ns_median}"
        )
    return "\n".join(lines) + "\n"
