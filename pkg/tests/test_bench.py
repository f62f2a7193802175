import csv
import io
import math

import numpy as np
import pytest

from passt import bench, net
from passt.tokenizer import PatchGeometry

TINY = net.ModelConfig(embed_dim=16, heads=2, depth=1, n_classes=4, geometry=PatchGeometry(16, 16))


def analytic_rows(config, ns, b=1):
    rows = []
    for n in ns:
        c = bench.analytic_cost(config, n, b)
        rows.append({"n": n, "analytic_quadratic_flops": c.attn_quadratic_flops,
                     "analytic_linear_flops": c.linear_flops, "empirical_sps": 1.0})
    return rows


def test_doubling_n():
    cfg = net.ModelConfig()
    a, b = bench.analytic_cost(cfg, 300), bench.analytic_cost(cfg, 600)
    assert b.attn_quadratic_flops == 4 * a.attn_quadratic_flops
    assert b.linear_flops == 2 * a.linear_flops
    assert b.attn_matrix_bytes == 4 * a.attn_matrix_bytes


def test_attention_bytes_single_head():
    cfg = net.ModelConfig(embed_dim=8, heads=1, depth=1, n_classes=1)
    assert bench.analytic_cost(cfg, 1).attn_matrix_bytes == 4
    assert bench.analytic_cost(net.ModelConfig(), 474, b=2).attn_matrix_bytes == 4 * 2 * 12 * 474 ** 2 * 12


def test_quadratic_term_by_hand():
    cfg = net.ModelConfig(embed_dim=8, heads=2, depth=3, n_classes=1)
    # per layer: QK^T and AV each 2*b*h*n^2*dh, softmax 5*b*h*n^2
    n, dh = 10, 4
    per_layer = 2 * (2 * 2 * n * n * dh) + 5 * 2 * n * n
    assert bench.analytic_cost(cfg, n).attn_quadratic_flops == 3 * per_layer


def test_scaling_exponents_exact():
    rows = analytic_rows(net.ModelConfig(), [254, 474, 790, 1190, 2380])
    assert abs(bench.fit_scaling_exponent(rows, "analytic") - 2.0) < 1e-9
    assert abs(bench.fit_scaling_exponent(rows, "linear") - 1.0) < 1e-9


def test_fit_requires_span():
    with pytest.raises(ValueError):
        bench.fit_scaling_exponent(analytic_rows(TINY, [100, 200, 300]))
    with pytest.raises(ValueError):
        bench.fit_scaling_exponent(analytic_rows(TINY, [100, 200, 300, 400]))
    with pytest.raises(ValueError):
        bench.fit_scaling_exponent(analytic_rows(TINY, [100, 200, 400, 800]), term="bogus")


def test_analytic_errors():
    with pytest.raises(ValueError):
        bench.analytic_cost(TINY, 10, b=0)


def test_measure_throughput_rows():
    rows = bench.measure_throughput(TINY, [64, 16, 32], b=2, repeats=2)
    assert [r["n"] for r in rows] == [16, 32, 64]
    for r in rows:
        assert set(bench.CSV_COLUMNS) <= set(r)
        assert r["empirical_sps"] > 0 and r["peak_bytes"] > 0
        assert r["config_hash"] == bench.config_hash(TINY)
    with pytest.raises(ValueError):
        bench.measure_throughput(TINY, [16], b=0)


def test_longer_sequences_are_slower():
    cfg = net.ModelConfig(embed_dim=32, heads=2, depth=1, n_classes=4)
    rows = bench.measure_throughput(cfg, [100, 800], b=2, repeats=3)
    assert rows[0]["empirical_sps"] > rows[1]["empirical_sps"]
    assert rows[0]["peak_bytes"] < rows[1]["peak_bytes"]


def test_repeat_stability():
    cfg = net.ModelConfig(embed_dim=32, heads=2, depth=1, n_classes=4)
    one = bench.measure_throughput(cfg, [800], b=2, repeats=1)[0]["empirical_sps"]
    nine = bench.measure_throughput(cfg, [800], b=2, repeats=9)[0]["empirical_sps"]
    assert abs(one - nine) / nine < 0.25


def test_attention_bytes_short_vs_long():
    cfg = net.ModelConfig()
    ratio = bench.analytic_cost(cfg, 474).attn_matrix_bytes / bench.analytic_cost(cfg, 1190).attn_matrix_bytes
    assert ratio == pytest.approx((474 / 1190) ** 2, rel=1e-12)
    assert round(ratio, 3) == 0.159


@pytest.mark.slow
def test_empirical_scaling_exponent():
    cfg = net.ModelConfig(embed_dim=16, heads=2, depth=1, n_classes=4)
    rows = bench.measure_throughput(cfg, [256, 512, 1024, 2048, 4096], b=1, repeats=3)
    slope = bench.fit_scaling_exponent(rows, "empirical")
    assert 1.3 <= slope <= 2.2
    t = [1 / r["empirical_sps"] for r in rows]
    low = math.log(t[2] / t[0]) / math.log(4)
    high = math.log(t[4] / t[2]) / math.log(4)
    assert high > low
    # measured cost never contradicts the analytic ordering
    assert all(a < b for a, b in zip(t, t[1:]))


def test_backward_measurement():
    rows = bench.measure_throughput(TINY, [32], b=1, repeats=1, backward=True)
    assert rows[0]["empirical_sps"] > 0


def test_csv_schema_and_order():
    rows = bench.measure_throughput(TINY, [32, 16], b=1, repeats=1)
    text = bench.to_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert tuple(parsed[0].keys()) == bench.CSV_COLUMNS
    assert [int(r["n"]) for r in parsed] == [16, 32]


def test_empirical_fit_uses_inverse_throughput():
    rows = [{"n": n, "empirical_sps": 1.0 / n ** 2} for n in (100, 200, 400, 800)]
    rows.append({"n": 1600, "empirical_sps": "OOM"})
    assert bench.fit_scaling_exponent(rows, "empirical") == pytest.approx(2.0)


def test_figure_rows():
    rows = [{"n": 474, "empirical_sps": 10.0, "peak_bytes": 5}, {"n": 100, "empirical_sps": 20.0, "peak_bytes": 1}]
    fig = bench.figure_rows(rows)
    assert [f["n"] for f in fig] == [100, 474]
    assert fig[1]["map"] == 0.471 and fig[0]["map"] == ""


def test_config_hash_stable():
    assert bench.config_hash(TINY) == bench.config_hash(net.ModelConfig(
        embed_dim=16, heads=2, depth=1, n_classes=4, geometry=PatchGeometry(16, 16)))
    assert bench.config_hash(TINY) != bench.config_hash(net.ModelConfig())
    assert len(bench.config_hash(TINY)) == 12
