"""Three-stage benchmark: unpruned, pruned, pruned + compiler optimizations."""

from __future__ import annotations

import csv
import io
import json
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .graph import GraphError, GraphIR
from .kernels import ExecPlan, max_rel_error, run_graph
from .pipeline import PruneConfig, compile_graph, prune_graph
from .sfm import model_bytes

__all__ = [
    "STAGES",
    "GATE_TOLERANCE",
    "BenchGateError",
    "StageResult",
    "ModelReport",
    "BenchReport",
    "cpu_name",
    "time_callable",
    "bench_pipeline",
]

STAGES = ("unpruned", "pruned", "pruned+compiler")
GATE_TOLERANCE = 1e-4


class BenchGateError(GraphError):
    """Optimized execution disagrees with the reference beyond tolerance."""


@dataclass
class StageResult:
    name: str
    ms_median: float
    macs: int | None = None
    bytes: int | None = None


@dataclass
class ModelReport:
    name: str
    stages: list[StageResult]
    note: str = "randomly initialized miniature stand-in"

    @property
    def speedups(self) -> list[float]:
        base = self.stages[0].ms_median
        return [base / s.ms_median for s in self.stages]

    def to_dict(self, timing: bool = True) -> dict:
        stages = []
        for s in self.stages:
            d = {"name": s.name, "macs": s.macs, "bytes": s.bytes}
            if timing:
                d["ms_median"] = s.ms_median
            stages.append(d)
        out = {"name": self.name, "note": self.note, "stages": stages}
        if timing:
            out["speedups"] = [round(v, 3) for v in self.speedups]
        return out


@dataclass
class BenchReport:
    env: dict
    models: list[ModelReport] = field(default_factory=list)

    @classmethod
    def from_timings(cls, table: Mapping[str, Sequence[float]], env: dict | None = None,
                     note: str = "timings supplied as a fixture") -> "BenchReport":
        """Build a report from given per-stage times (ms), e.g. published numbers."""
        models = [ModelReport(name, [StageResult(st, float(t)) for st, t in zip(STAGES, times)],
                              note)
                  for name, times in table.items()]
        return cls(env or {"cpu": None, "workers": None, "reps": None}, models)

    def to_dict(self, timing: bool = True) -> dict:
        env = dict(self.env)
        if not timing:
            env.pop("cpu", None)
        return {"env": env, "models": [m.to_dict(timing) for m in self.models]}

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "stage", "ms_median", "macs", "bytes", "speedup"])
        for m in self.models:
            for s, sp in zip(m.stages, m.speedups):
                w.writerow([m.name, s.name, s.ms_median, s.macs, s.bytes, f"{sp:.3f}"])
        return buf.getvalue()

    def format_table(self) -> str:
        lines = [f"{'model':<16}{'stage':<18}{'ms':>10}{'MACs':>12}{'bytes':>10}{'speedup':>9}"]
        for m in self.models:
            for s, sp in zip(m.stages, m.speedups):
                lines.append(f"{m.name:<16}{s.name:<18}{s.ms_median:>10.3f}"
                             f"{s.macs if s.macs is not None else '-':>12}"
                             f"{s.bytes if s.bytes is not None else '-':>10}{sp:>8.2f}x")
        return "\n".join(lines)


def cpu_name() -> str:
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def time_callable(fn: Callable[[], object], reps: int = 9, warmup: int = 2) -> list[float]:
    """Wall times in ms of ``reps`` calls after ``warmup`` untimed calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return times


def bench_pipeline(g: GraphIR, config: PruneConfig, reps: int = 9, workers: int = 1,
                   warmup: int = 2, seed: int = 42, name: str = "model") -> BenchReport:
    """Prune, compile and time ``g`` at the three stages.

    The correctness gate (compiled vs. pruned reference within
    `GATE_TOLERANCE`) runs before any timing; a failure raises
    `BenchGateError` and no report is produced.
    """
    if reps < 5 or warmup < 2:
        raise ValueError("need reps >= 5 and warmup >= 2")
    pruned, _ = prune_graph(g, config)
    compiled, plan3 = compile_graph(pruned, workers)
    rng = np.random.default_rng(seed)
    x = {i: rng.random(tuple(g.shapes[i]), dtype=np.float32) for i in g.input_ids}

    variants = [(g, ExecPlan.for_graph(g, workers)),
                (pruned, ExecPlan.for_graph(pruned, workers)),
                (compiled, plan3)]
    ref, _ = run_graph(pruned, variants[1][1], x)
    got, _ = run_graph(compiled, plan3, x)
    err = max(max_rel_error(got[i], ref[i]) for i in ref)
    if not err <= GATE_TOLERANCE:
        raise BenchGateError(f"{name}: compiled output differs from reference "
                             f"(max rel error {err:.3g} > {GATE_TOLERANCE})")

    stages = []
    for stage, (graph, plan) in zip(STAGES, variants):
        _, counter = run_graph(graph, plan, x)
        times = time_callable(lambda: run_graph(graph, plan, x), reps, warmup)
        stages.append(StageResult(stage, round(statistics.median(times), 4),
                                  counter.total, model_bytes(graph)))
    env = {"cpu": cpu_name(), "workers": workers, "reps": reps, "warmup": warmup}
    return BenchReport(env, [ModelReport(name, stages)])
