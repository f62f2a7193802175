"""Sequence-length cost model and throughput benchmark.

Analytic costs are exact per-layer polynomials in the sequence length ``n``;
the empirical side times the transformer stack on random token sequences.
"""

import csv
from dataclasses import dataclass
import hashlib
import io
import json
import statistics
import time
import tracemalloc

import numpy as np

from passt import autograd as ag
from passt import net

CSV_COLUMNS = (
    "n", "b", "depth", "analytic_quadratic_flops", "analytic_linear_flops",
    "attn_matrix_bytes", "empirical_sps", "peak_bytes", "config_hash",
)
SOFTMAX_FLOPS_PER_ELEM = 5  # max, subtract, exp, sum, divide
LAYERNORM_FLOPS_PER_ELEM = 8

# Published single-model runs: training sequence length, mAP, spectrograms/s, GB per sample.
REFERENCE_RUNS = {
    "PaSST-B": (1190, 0.462, 23.1, 2.33),
    "PaSST-U": (790, 0.466, 43.2, 1.14),
    "PaSST-S": (474, 0.471, 88.7, 0.513),
    "PaSST-S-L": (474, 0.459, 148.6, 0.311),
    "PaSST-S-N": (254, 0.466, 184.2, 0.202),
}


@dataclass(frozen=True)
class Cost:
    attn_quadratic_flops: int
    linear_flops: int
    attn_matrix_bytes: int


def analytic_cost(config, n, b=1):
    """FLOPs split into the part quadratic in ``n`` and the part linear in ``n``.

    Quadratic per layer: ``Q K^T`` and ``A V`` at ``2 b h n^2 (E/h)`` each,
    plus the softmax over ``b h n^2`` entries. Linear per layer: the four
    E x E projections, the two MLP matmuls, two layer norms and the residual
    adds. The patch embedding is counted once. ``attn_matrix_bytes`` is the
    float32 footprint of every layer's attention matrix, ``4 b h n^2 d``.
    """
    if b < 1 or n < 1:
        raise ValueError("batch size and sequence length must be positive")
    E, h, d = config.embed_dim, config.heads, config.depth
    dh, H = config.head_dim, config.hidden_dim
    quad_layer = 2 * (2 * b * h * n * n * dh) + SOFTMAX_FLOPS_PER_ELEM * b * h * n * n
    linear_layer = (
        4 * 2 * b * n * E * E
        + 2 * 2 * b * n * E * H
        + 2 * LAYERNORM_FLOPS_PER_ELEM * b * n * E
        + 2 * b * n * E
    )
    embed = 2 * b * n * config.geometry.patch_dim * E
    return Cost(
        attn_quadratic_flops=d * quad_layer,
        linear_flops=d * linear_layer + embed,
        attn_matrix_bytes=4 * b * h * n * n * d,
    )


def config_hash(config):
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _stack_forward(x, p, config, backward):
    leaves = net.as_leaves(p, requires_grad=backward)
    h = ag.Tensor(x)
    for i in range(config.depth):
        h = net.block_forward(h, leaves, config.heads, prefix=f"blocks.{i}.")
    h = ag.layer_norm(h, leaves["norm.weight"], leaves["norm.bias"], net.LN_EPS)
    pooled = ag.take(h, np.arange(config.n_special), axis=1).mean(axis=1)
    logits = net._linear(pooled, leaves, "head")
    if backward:
        ag.backward(ag.bce_with_logits(logits, np.zeros(logits.shape)))
    return logits.data


def measure_throughput(config, ns, b=4, repeats=5, warmup=1, backward=False, seed=0):
    """Time the transformer stack at each sequence length in ``ns``.

    Returns one dict per ``n`` (sorted) with the ``CSV_COLUMNS`` keys.
    Throughput is ``b`` divided by the median wall time over ``repeats``
    timed runs; the allocator high-water mark comes from a separate untimed
    run under tracemalloc. A MemoryError marks that row ``OOM``.
    """
    if b < 1:
        raise ValueError("batch size must be at least 1")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    params = net.init_params(config, seed=seed)
    digest = config_hash(config)
    rows = []
    for n in sorted(set(int(v) for v in ns)):
        cost = analytic_cost(config, n, b)
        row = {
            "n": n, "b": b, "depth": config.depth,
            "analytic_quadratic_flops": cost.attn_quadratic_flops,
            "analytic_linear_flops": cost.linear_flops,
            "attn_matrix_bytes": cost.attn_matrix_bytes,
            "config_hash": digest,
        }
        x = np.random.default_rng([seed, n]).standard_normal((b, n, config.embed_dim)).astype(np.float32)
        try:
            for _ in range(warmup):
                _stack_forward(x, params, config, backward)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                _stack_forward(x, params, config, backward)
                times.append(time.perf_counter() - t0)
            tracemalloc.start()
            try:
                _stack_forward(x, params, config, backward)
                _, peak = tracemalloc.get_traced_memory()
            finally:
                tracemalloc.stop()
            row["empirical_sps"] = b / statistics.median(times)
            row["peak_bytes"] = peak
        except MemoryError:
            row["empirical_sps"] = "OOM"
            row["peak_bytes"] = "OOM"
        rows.append(row)
    return rows


def fit_scaling_exponent(rows, term="analytic"):
    """Least-squares slope of log(cost) against log(n).

    ``term`` picks the cost: ``"analytic"`` (the quadratic attention term),
    ``"linear"`` (the analytic linear term) or ``"empirical"`` (seconds per
    spectrogram, the inverse of measured throughput).
    """
    pts = []
    for r in rows:
        if term in ("analytic", "quadratic"):
            y = r["analytic_quadratic_flops"]
        elif term == "linear":
            y = r["analytic_linear_flops"]
        elif term == "empirical":
            if r["empirical_sps"] == "OOM":
                continue
            y = 1.0 / r["empirical_sps"]
        else:
            raise ValueError(f"unknown term {term!r}")
        pts.append((float(r["n"]), float(y)))
    ns = sorted({n for n, _ in pts})
    if len(ns) < 4 or ns[-1] / ns[0] < 8:
        raise ValueError("need at least 4 distinct n values spanning a factor of 8")
    x = np.log([n for n, _ in pts])
    y = np.log([v for _, v in pts])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def write_csv(rows, fh):
    writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in sorted(rows, key=lambda r: r["n"]):
        writer.writerow(r)


def to_csv(rows):
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


def figure_rows(rows):
    """Rows for a speed / memory / mAP bubble chart; mAP only where a reference run matches ``n``."""
    known = {}
    for seq, m, _, _ in REFERENCE_RUNS.values():
        known.setdefault(seq, m)
    out = []
    for r in sorted(rows, key=lambda r: r["n"]):
        out.append({
            "n": r["n"],
            "speed": r["empirical_sps"],
            "mem": r["peak_bytes"],
            "map": known.get(r["n"], ""),
        })
    return out
