import numpy as np
import pytest

from structsparse.bench import STAGES, BenchGateError, BenchReport, bench_pipeline, time_callable
from structsparse.pipeline import PruneConfig
from structsparse.zoo import generate

PUBLISHED_MS = {"style transfer": [283, 178, 67], "coloring": [137, 85, 38],
         "super resolution": [269, 192, 73]}


def test_fixture_speedups():
    rep = BenchReport.from_timings(PUBLISHED_MS)
    final = [round(m.speedups[-1], 2) for m in rep.models]
    assert final == [4.22, 3.61, 3.68]
    assert [round(v, 2) for v in rep.models[0].speedups] == [1.0, 1.59, 4.22]


def test_report_arithmetic_to_three_places():
    rep = BenchReport.from_timings(PUBLISHED_MS)
    for m in rep.to_dict()["models"]:
        base = m["stages"][0]["ms_median"]
        for s, sp in zip(m["stages"], m["speedups"]):
            assert sp == round(base / s["ms_median"], 3)


def test_table_and_csv_render():
    rep = BenchReport.from_timings(PUBLISHED_MS)
    assert "4.22x" in rep.format_table()
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("model,stage") and len(lines) == 10


def test_time_callable_counts():
    calls = []
    times = time_callable(lambda: calls.append(1), reps=5, warmup=2)
    assert len(times) == 5 and len(calls) == 7


def test_bench_rejects_short_protocol():
    with pytest.raises(ValueError):
        bench_pipeline(generate("sr-mini", size=8), PruneConfig(), reps=3)


def test_full_keep_equal_macs():
    g = generate("sr-mini", size=8)
    rep = bench_pipeline(g, PruneConfig.from_dict({"method": "oneshot", "default": {
        "type": "column", "keep_ratio": 1.0}}), reps=5)
    macs = [s.macs for s in rep.models[0].stages]
    assert macs[0] == macs[1] == macs[2]
    assert [s.name for s in rep.models[0].stages] == list(STAGES)


def test_gate_failure_aborts(monkeypatch):
    import structsparse.bench as bench

    real = bench.compile_graph

    def broken(g, workers=1):
        cg, plan = real(g, workers)
        nodes = []
        for n in cg.nodes:
            if n.kind == "Conv2D":
                b = n.weights.get("bias")
                n = n.__class__(n.id, n.kind, n.attrs, n.input_ids,
                                {**n.weights, "bias": (np.zeros(n.attrs["out_channels"], np.float32)
                                                       if b is None else b) + 1})
            nodes.append(n)
        return cg.with_nodes(nodes), plan

    monkeypatch.setattr(bench, "compile_graph", broken)
    with pytest.raises(BenchGateError):
        bench_pipeline(generate("sr-mini", size=8), PruneConfig.from_dict(
            {"method": "oneshot", "default": {"type": "column", "keep_ratio": 0.5}}), reps=5)
