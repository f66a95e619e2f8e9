"""Execution engine: dense reference kernels, structured-sparse kernels, MAC accounting."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .formats import CompactColumnMatrix, PatternPackedWeights, RowCompactMatrix, decode_pattern
from .graph import CONV_LIKE, GraphError, GraphIR, LayerNode, ShapeError, apply_activation
from .lowering import conv_output_size, dense_gemm, im2col, row_chunks
from .reorder import ReorderedLayout, apply_layout, build_layout

__all__ = [
    "KERNELS",
    "ExecError",
    "FlopCounter",
    "PlanEntry",
    "ExecPlan",
    "dense_gemm",
    "im2col",
    "dense_conv2d",
    "depthwise_conv2d",
    "dense_linear",
    "spmm_column_compact",
    "conv2d_column_compact",
    "conv2d_row_compact",
    "pattern_layout",
    "conv2d_pattern_reordered",
    "run_graph",
    "reference_run",
    "max_rel_error",
]

KERNELS = ("dense", "column-compact", "row-compact", "pattern-reordered")


class ExecError(GraphError):
    pass


@dataclass
class FlopCounter:
    macs: dict[int, int] = field(default_factory=dict)
    gathers: dict[int, int] = field(default_factory=dict)

    def add(self, layer: int, macs: int, gathers: int = 0) -> None:
        self.macs[layer] = self.macs.get(layer, 0) + int(macs)
        if gathers:
            self.gathers[layer] = self.gathers.get(layer, 0) + int(gathers)

    @property
    def total(self) -> int:
        return sum(self.macs.values())


def max_rel_error(actual, reference) -> float:
    """Largest elementwise ``|a - r| / max(1, |r|)``."""
    a = np.asarray(actual, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if a.shape != r.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {r.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - r) / np.maximum(1.0, np.abs(r))))


def _finish(acc: np.ndarray, bias, epilogue) -> np.ndarray:
    if bias is not None:
        acc += np.asarray(bias, np.float32).reshape((-1,) + (1,) * (acc.ndim - 1))
    return apply_activation(acc, epilogue).astype(np.float32, copy=False)


def _check_x(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise ShapeError(f"expected an NCHW tensor, got shape {x.shape}")
    return x


def dense_conv2d(x, w, bias=None, stride: int = 1, pad: int = 0, epilogue=None,
                 counter: FlopCounter | None = None, layer: int = -1) -> np.ndarray:
    """Direct convolution; accumulation runs over (in_c, kh, kw) in order."""
    x = _check_x(x)
    w = np.asarray(w, dtype=np.float32)
    n, c, h, wd = x.shape
    out_c, in_c, kh, kw = w.shape
    if in_c != c:
        raise ShapeError(f"conv expects {in_c} input channels, got {x.shape}", layer)
    oh, ow = conv_output_size(h, wd, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.empty((n, out_c, oh, ow), dtype=np.float32)
    tmp = np.empty((out_c, oh, ow), dtype=np.float32)
    for b in range(n):
        acc = np.zeros((out_c, oh, ow), dtype=np.float32)
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    patch = xp[b, ci, i:i + stride * (oh - 1) + 1:stride,
                               j:j + stride * (ow - 1) + 1:stride]
                    np.multiply(w[:, ci, i, j][:, None, None], patch[None], out=tmp)
                    acc += tmp
        out[b] = _finish(acc, bias, epilogue)
    if counter is not None:
        counter.add(layer, n * out_c * in_c * kh * kw * oh * ow)
    return out


def depthwise_conv2d(x, w, bias=None, stride: int = 1, pad: int = 0, epilogue=None,
                     counter: FlopCounter | None = None, layer: int = -1) -> np.ndarray:
    x = _check_x(x)
    w = np.asarray(w, dtype=np.float32)
    n, c, h, wd = x.shape
    if w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise weights {w.shape} do not match input {x.shape}", layer)
    kh, kw = w.shape[2:]
    oh, ow = conv_output_size(h, wd, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.empty((n, c, oh, ow), dtype=np.float32)
    for b in range(n):
        acc = np.zeros((c, oh, ow), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                patch = xp[b, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
                acc += w[:, 0, i, j][:, None, None] * patch
        out[b] = _finish(acc, bias, epilogue)
    if counter is not None:
        counter.add(layer, n * c * kh * kw * oh * ow)
    return out


def _features(x) -> np.ndarray:
    x = _check_x(x)
    return np.ascontiguousarray(x.reshape(x.shape[0], -1).T)


def dense_linear(x, w, bias=None, epilogue=None, counter: FlopCounter | None = None,
                 layer: int = -1, workers: int = 1) -> np.ndarray:
    feats = _features(x)
    w = np.asarray(w, dtype=np.float32)
    if w.shape[1] != feats.shape[0]:
        raise ShapeError(f"dense layer expects {w.shape[1]} features, got {feats.shape[0]}", layer)
    y = _finish(dense_gemm(w, feats, workers), bias, epilogue)
    if counter is not None:
        counter.add(layer, w.size * feats.shape[1])
    return y.T.reshape(x.shape[0] if np.ndim(x) == 4 else 1, -1, 1, 1).copy()


def spmm_column_compact(w: CompactColumnMatrix, x, counter: FlopCounter | None = None,
                        layer: int = -1, workers: int = 1) -> np.ndarray:
    """``decode(w) @ x`` touching only the kept rows of ``x``."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] != w.n:
        raise ValueError(f"dimension mismatch: matrix has {w.n} columns, x is {x.shape}")
    xk = x[w.kept_cols.astype(np.intp)]
    if counter is not None:
        counter.add(layer, w.m * w.k * x.shape[1], gathers=xk.size)
    return dense_gemm(w.values, xk, workers)


def _lowered(x, kh, kw, stride, pad, fn, out_c, bias, epilogue):
    n = x.shape[0]
    oh, ow = conv_output_size(x.shape[2], x.shape[3], kh, kw, stride, pad)
    out = np.empty((n, out_c, oh, ow), dtype=np.float32)
    for b in range(n):
        y = fn(im2col(x[b], kh, kw, stride, pad))
        out[b] = _finish(y, bias, epilogue).reshape(out_c, oh, ow)
    return out


def conv2d_column_compact(x, w: CompactColumnMatrix, kernel: tuple[int, int], bias=None,
                          stride: int = 1, pad: int = 0, epilogue=None,
                          counter: FlopCounter | None = None, layer: int = -1,
                          workers: int = 1) -> np.ndarray:
    """Conv via im2col where pruned weight columns drop whole im2col rows."""
    x = _check_x(x)
    kh, kw = kernel
    if w.n != x.shape[1] * kh * kw:
        raise ShapeError(f"compact weights expect {w.n} lowered rows, input gives "
                         f"{x.shape[1] * kh * kw}", layer)
    return _lowered(x, kh, kw, stride, pad,
                    lambda cols: spmm_column_compact(w, cols, counter, layer, workers),
                    w.m, bias, epilogue)


def conv2d_row_compact(x, w: RowCompactMatrix, kernel: tuple[int, int], bias=None,
                       stride: int = 1, pad: int = 0, epilogue=None,
                       counter: FlopCounter | None = None, layer: int = -1,
                       workers: int = 1) -> np.ndarray:
    """Conv computing only the surviving filters; pruned filters yield epilogue(bias)."""
    x = _check_x(x)
    kh, kw = kernel
    out_c, ncols = w.shape
    if ncols != x.shape[1] * kh * kw:
        raise ShapeError(f"compact weights expect {ncols} lowered rows, input gives "
                         f"{x.shape[1] * kh * kw}", layer)
    rows = np.ascontiguousarray(w.values.T)
    kept = w.kept_cols.astype(np.intp)

    def fn(cols):
        y = np.zeros((out_c, cols.shape[1]), dtype=np.float32)
        y[kept] = dense_gemm(rows, cols, workers)
        if counter is not None:
            counter.add(layer, rows.size * cols.shape[1])
        return y

    return _lowered(x, kh, kw, stride, pad, fn, out_c, bias, epilogue)


def pattern_layout(w: PatternPackedWeights) -> ReorderedLayout:
    """Reordered layout for a pattern-packed layer.

    Rows (filters) are keyed by their tuple of per-kernel pattern ids, so each
    group shares one structural support in the lowered column space.
    """
    dense = decode_pattern(w).reshape(w.out_c, -1)
    mask = w.structural_mask().reshape(w.out_c, -1)
    keys = [tuple(row.tolist()) for row in w.pattern_ids]
    return build_layout(dense, keys, mask)


def conv2d_pattern_reordered(x, w: PatternPackedWeights, layout: ReorderedLayout | None = None,
                             bias=None, stride: int = 1, pad: int = 0, epilogue=None,
                             counter: FlopCounter | None = None, layer: int = -1,
                             workers: int = 1) -> np.ndarray:
    x = _check_x(x)
    layout = pattern_layout(w) if layout is None else layout
    ncols = w.in_c * w.kh * w.kw
    if layout.n_rows != w.out_c or layout.n_cols != ncols:
        raise ExecError(f"layout {layout.n_rows}x{layout.n_cols} does not match weights "
                        f"{w.out_c}x{ncols}", layer)
    if layout.macs_per_column != w.surviving * w.library.retained:
        raise ExecError("layout support does not match the packed pattern structure", layer)
    if x.shape[1] != w.in_c:
        raise ShapeError(f"conv expects {w.in_c} input channels, got {x.shape}", layer)

    def fn(cols):
        if counter is not None:
            counter.add(layer, layout.macs_per_column * cols.shape[1])
        return apply_layout(cols, layout, workers)

    return _lowered(x, w.kh, w.kw, stride, pad, fn, w.out_c, bias, epilogue)


@dataclass(frozen=True)
class PlanEntry:
    kernel: str = "dense"
    workers: int = 1

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.workers < 1:
            raise ValueError("worker_count must be >= 1")


def kernel_for(node: LayerNode) -> str:
    w = (node.weights or {}).get("weight")
    if isinstance(w, RowCompactMatrix):
        return "row-compact"
    if isinstance(w, CompactColumnMatrix):
        return "column-compact"
    if isinstance(w, PatternPackedWeights):
        return "pattern-reordered"
    return "dense"


@dataclass(frozen=True)
class ExecPlan:
    entries: Mapping[int, PlanEntry]

    @classmethod
    def for_graph(cls, g: GraphIR, workers: int = 1) -> "ExecPlan":
        return cls({n.id: PlanEntry(kernel_for(n), workers) for n in g.nodes})


def _run_node(node: LayerNode, ins: list[np.ndarray], entry: PlanEntry,
              counter: FlopCounter) -> np.ndarray:
    kind, a = node.kind, node.attrs
    if kind == "Output":
        return ins[0]
    if kind == "Activation":
        return apply_activation(ins[0], {"fn": a.get("fn", "relu"), "alpha": a.get("alpha", 0.01)})
    if kind == "Add":
        acc = ins[0].copy()
        for t in ins[1:]:
            acc += t
        return acc
    if kind == "Upsample":
        f = int(a.get("factor", 2))
        return np.repeat(np.repeat(ins[0], f, axis=2), f, axis=3)
    if kind == "BatchNorm":
        p = node.weights
        if not p:
            raise ExecError(f"node {node.id} (BatchNorm) has no parameters", node.id)
        eps = np.float32(a.get("eps", 1e-5))
        shape = (1, -1, 1, 1)
        inv = (np.asarray(p["gamma"], np.float32)
               / np.sqrt(np.asarray(p["var"], np.float32) + eps)).reshape(shape)
        return ((ins[0] - np.asarray(p["mean"], np.float32).reshape(shape)) * inv
                + np.asarray(p["beta"], np.float32).reshape(shape)).astype(np.float32)
    if kind not in CONV_LIKE:
        raise ExecError(f"node {node.id}: cannot execute kind {kind}", node.id)

    weights = node.weights or {}
    w = weights.get("weight")
    if w is None:
        raise ExecError(f"node {node.id} ({kind}) has no weights", node.id)
    if kernel_for(node) != entry.kernel:
        raise ExecError(f"node {node.id}: plan kernel {entry.kernel!r} does not match "
                        f"weight encoding {kernel_for(node)!r}", node.id)
    bias, epi, nw = weights.get("bias"), node.epilogue, entry.workers
    common = dict(bias=bias, stride=node.stride, pad=node.padding, epilogue=epi,
                  counter=counter, layer=node.id)
    x = ins[0]
    if kind == "Dense":
        if entry.kernel == "dense":
            return dense_linear(x, w, bias, epi, counter, node.id, nw)
        feats = _features(x)
        if entry.kernel == "column-compact":
            y = spmm_column_compact(w, feats, counter, node.id, nw)
        else:
            out_f, _ = w.shape
            y = np.zeros((out_f, feats.shape[1]), dtype=np.float32)
            rows = np.ascontiguousarray(w.values.T)
            y[w.kept_cols.astype(np.intp)] = dense_gemm(rows, feats, nw)
            counter.add(node.id, rows.size * feats.shape[1])
        y = _finish(y, bias, epi)
        return y.T.reshape(x.shape[0], -1, 1, 1).copy()
    if kind == "DepthwiseConv2D":
        return depthwise_conv2d(x, w, **common)
    if entry.kernel == "dense":
        return _dense_conv_rows(x, w, nw, **common)
    if entry.kernel == "column-compact":
        return conv2d_column_compact(x, w, node.kernel, workers=nw, **common)
    if entry.kernel == "row-compact":
        return conv2d_row_compact(x, w, node.kernel, workers=nw, **common)
    return conv2d_pattern_reordered(x, w, weights.get("layout"), workers=nw, **common)


def _dense_conv_rows(x, w, workers, **kw):
    """Dense conv with output channels split across workers."""
    chunks = row_chunks(np.shape(w)[0], workers)
    if len(chunks) <= 1:
        return dense_conv2d(x, w, **kw)
    w = np.asarray(w, np.float32)
    bias, counter, layer = kw.pop("bias"), kw.pop("counter"), kw.pop("layer")

    def part(ab):
        a, b = ab
        return dense_conv2d(x, w[a:b], None if bias is None else np.asarray(bias)[a:b],
                            layer=layer, **kw)

    with ThreadPoolExecutor(len(chunks)) as pool:
        parts = list(pool.map(part, chunks))
    out = np.concatenate(parts, axis=1)
    if counter is not None:
        counter.add(layer, int(np.prod(w.shape[1:])) * w.shape[0] * out.shape[0] * out.shape[2] * out.shape[3])
    return out


def run_graph(g: GraphIR, plan: ExecPlan, inputs,
              capture: dict | None = None) -> tuple[dict[int, np.ndarray], FlopCounter]:
    """Execute ``g`` in topological order; returns outputs by node id and MAC counts.

    If ``capture`` is given it receives every node's output.
    """
    if not isinstance(inputs, Mapping):
        if len(g.input_ids) != 1:
            raise ExecError("graph has several inputs; pass a mapping of input id to tensor")
        inputs = {g.input_ids[0]: inputs}
    counter = FlopCounter()
    values: dict[int, np.ndarray] = {}
    for node in g.nodes:
        if node.kind == "Input":
            x = np.asarray(inputs[node.id], dtype=np.float32)
            if x.shape != tuple(g.shapes[node.id]):
                raise ShapeError(f"node {node.id}: input shape {x.shape} != "
                                 f"{tuple(g.shapes[node.id])}", node.id)
            values[node.id] = x
            continue
        entry = plan.entries.get(node.id)
        if entry is None:
            raise ExecError(f"node {node.id} ({node.kind}) has no plan entry", node.id)
        try:
            y = _run_node(node, [values[i] for i in node.input_ids], entry, counter)
        except (ValueError, IndexError) as exc:
            if isinstance(exc, GraphError) and exc.node_id is not None:
                raise
            raise ExecError(f"node {node.id} ({node.kind}): {exc}", node.id) from exc
        if y.shape != tuple(g.shapes[node.id]):
            raise ShapeError(f"node {node.id} ({node.kind}): produced {y.shape}, expected "
                             f"{tuple(g.shapes[node.id])}", node.id)
        if not np.all(np.isfinite(y)):
            raise ExecError(f"node {node.id} ({node.kind}) produced non-finite values", node.id)
        values[node.id] = y
    if capture is not None:
        capture.update(values)
    return {i: values[i] for i in g.output_ids}, counter


def reference_run(g: GraphIR, inputs) -> tuple[dict[int, np.ndarray], FlopCounter]:
    """All-dense execution of ``g`` as given."""
    return run_graph(g, ExecPlan.for_graph(g), inputs)
