"""Command-line driver.

Exit codes: 0 ok, 1 other failure, 2 usage error, 3 invalid model file,
4 constraint violation or failed correctness gate.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import BenchGateError, BenchReport, bench_pipeline
from .formats import FormatError, storage_bytes
from .graph import GraphError
from .imageio import ImageError, read_ppm, write_ppm
from .kernels import ExecPlan, run_graph
from .pipeline import ConstraintViolation, PruneConfig, compile_graph, prune_graph
from .pruning import PruningError
from .reorder import ReorderedLayout
from .sfm import SFMError, layout_bytes, load_model, model_bytes, save_model
from .zoo import ZOO, generate

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MODEL, EXIT_CONSTRAINT = 0, 1, 2, 3, 4

DEFAULT_PRUNE = {"default": {"type": "column", "keep_ratio": 0.5}}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structsparse",
                                description="Structured pruning and sparse inference toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, model_help="SFM model file"):
        sp.add_argument("--model", required=True, help=model_help)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--seed", type=int, default=42)
        return sp

    sp = common(sub.add_parser("gen", help="write a zoo model"), f"one of {sorted(ZOO)}")
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--out", required=True)

    sp = common(sub.add_parser("prune", help="apply a pruning config"))
    sp.add_argument("--config", help="pruning config JSON (default: column keep 0.5)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", help="sparsity report path (default: <out>.report.json)")

    sp = common(sub.add_parser("compile", help="fuse, encode and reorder"))
    sp.add_argument("--out", required=True)

    sp = common(sub.add_parser("run", help="execute a model"))
    sp.add_argument("--input", help="P6 image input (default: random tensor)")
    sp.add_argument("--output", help="P6 image output")
    sp.add_argument("--out", help="raw output tensor (.npy)")

    sp = common(sub.add_parser("bench", help="three-stage benchmark"),
                "zoo names or SFM files, comma separated")
    sp.add_argument("--config", help="pruning config JSON")
    sp.add_argument("--reps", type=int, default=9)
    sp.add_argument("--out", required=True, help="report JSON (a .csv mirror is written too)")
    sp.add_argument("--timings", help="JSON {model: [unpruned, pruned, compiled] ms}; skips measuring")

    common(sub.add_parser("inspect", help="print graph, shapes and storage"))
    return p


def _load_config(path) -> PruneConfig:
    if path is None:
        return PruneConfig.from_dict(DEFAULT_PRUNE)
    try:
        return PruneConfig.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise PruningError(f"cannot read config {path}: {exc}") from exc


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_gen(a) -> int:
    g = generate(a.model, a.seed, a.size)
    save_model(a.out, g, name=a.model, meta={"seed": a.seed, "size": a.size})
    print(f"wrote {a.out} ({len(g.nodes)} nodes)")
    return EXIT_OK


def cmd_prune(a) -> int:
    g, doc = load_model(a.model)
    cfg = _load_config(a.config)
    pruned, report = prune_graph(g, cfg)
    report["config"] = cfg.to_dict()
    save_model(a.out, pruned, name=doc.get("name", ""), meta={"stage": "pruned"})
    _write_json(a.report or f"{a.out}.report.json", report)
    for lid, r in report["layers"].items():
        print(f"layer {lid:>3} {r['structure']['type']:<13} retained {r['retained_fraction']:.3f} "
              f"satisfies={r['satisfies']}")
    return EXIT_OK


def cmd_compile(a) -> int:
    g, doc = load_model(a.model)
    cg, plan = compile_graph(g, a.workers)
    save_model(a.out, cg, name=doc.get("name", ""), meta={"stage": "compiled"})
    kernels = {}
    for e in plan.entries.values():
        kernels[e.kernel] = kernels.get(e.kernel, 0) + 1
    print(f"wrote {a.out}: {len(g.nodes)} -> {len(cg.nodes)} nodes, kernels {kernels}")
    return EXIT_OK


def cmd_run(a) -> int:
    g, _ = load_model(a.model)
    (iid,) = g.input_ids
    shape = tuple(g.shapes[iid])
    if a.input:
        x = read_ppm(a.input)
        if shape[1] == 1:
            x = x.mean(axis=1, keepdims=True, dtype=np.float32)
        if x.shape != shape:
            raise GraphError(f"input image gives tensor {x.shape}, model expects {shape}", iid)
    else:
        x = np.random.default_rng(a.seed).random(shape, dtype=np.float32)
    outs, counter = run_graph(g, ExecPlan.for_graph(g, a.workers), x)
    y = outs[g.output_ids[0]]
    if a.output:
        write_ppm(a.output, y)
    if a.out:
        np.save(a.out, y)
    print(f"output {y.shape}, MACs {counter.total}")
    return EXIT_OK


def cmd_bench(a) -> int:
    if a.timings:
        table = json.loads(Path(a.timings).read_text())
        report = BenchReport.from_timings(table)
    else:
        cfg = _load_config(a.config)
        report = None
        for name in a.model.split(","):
            if name in ZOO:
                g = generate(name, a.seed)
            else:
                g, doc = load_model(name)
                name = doc.get("name") or Path(name).stem
            r = bench_pipeline(g, cfg, a.reps, a.workers, seed=a.seed, name=name)
            if report is None:
                report = r
            else:
                report.models.extend(r.models)
    Path(a.out).write_text(report.to_json())
    Path(a.out).with_suffix(".csv").write_text(report.to_csv())
    print(report.format_table())
    return EXIT_OK


def cmd_inspect(a) -> int:
    g, doc = load_model(a.model)
    print(f"model {doc.get('name', '')!r}: {len(g.nodes)} nodes")
    print(f"{'id':>4} {'kind':<16} {'inputs':<10} {'shape':<18} {'encoding':<18} {'bytes':>8}")
    for n in g.nodes:
        enc, size = "-", 0
        for obj in (n.weights or {}).values():
            if isinstance(obj, ReorderedLayout):
                size += layout_bytes(obj)
            elif obj is not None:
                size += storage_bytes(obj)
        w = (n.weights or {}).get("weight")
        if w is not None:
            enc = type(w).__name__ if not isinstance(w, np.ndarray) else "dense"
        extra = ""
        if n.epilogue:
            extra += f" +{n.epilogue['fn']}"
        if "structure" in n.attrs:
            extra += f" [{n.attrs['structure']['type']}]"
        print(f"{n.id:>4} {n.kind:<16} {','.join(map(str, n.input_ids)):<10} "
              f"{str(tuple(g.shapes[n.id])):<18} {enc:<18} {size:>8}{extra}")
    print(f"total weight bytes: {model_bytes(g)}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "prune": cmd_prune, "compile": cmd_compile, "run": cmd_run,
            "bench": cmd_bench, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except SFMError as exc:
        print(f"error: invalid model file: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (ConstraintViolation, BenchGateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except (GraphError, PruningError, FormatError, ImageError, KeyError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
