"""Layer-wise graph representation, shape inference and fusion passes.

A model is described by a plain declarative document (a dict, usually loaded
from JSON)::

    {"nodes": [
        {"id": 0, "kind": "Input", "attrs": {"shape": [1, 3, 32, 32]}},
        {"id": 1, "kind": "Conv2D", "inputs": [0],
         "attrs": {"in_channels": 3, "out_channels": 16, "kernel": [3, 3],
                   "stride": 1, "padding": 1}},
        {"id": 2, "kind": "Output", "inputs": [1]}]}

`build_graph` validates such a document and returns an immutable `GraphIR`.
Passes never mutate their input; they return new graphs.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, NamedTuple

import numpy as np

__all__ = [
    "NODE_KINDS",
    "CONV_LIKE",
    "ACTIVATIONS",
    "DEFAULT_BN_EPS",
    "GraphError",
    "CycleError",
    "DanglingReferenceError",
    "ShapeError",
    "TensorShape",
    "LayerNode",
    "GraphIR",
    "build_graph",
    "infer_shapes",
    "fuse_conv_bn",
    "fuse_conv_activation",
    "apply_activation",
]

NODE_KINDS = (
    "Input",
    "Output",
    "Conv2D",
    "DepthwiseConv2D",
    "Dense",
    "BatchNorm",
    "Activation",
    "Add",
    "Upsample",
)
CONV_LIKE = ("Conv2D", "DepthwiseConv2D", "Dense")
ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")
DEFAULT_BN_EPS = 1e-5

_INDEX_LIMIT = 2**31 - 1


class GraphError(ValueError):
    """Raised for malformed graph documents; carries the offending node id."""

    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message)
        self.node_id = node_id


class CycleError(GraphError):
    pass


class DanglingReferenceError(GraphError):
    pass


class ShapeError(GraphError):
    pass


class TensorShape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w

    def check(self, node_id: int | None = None) -> "TensorShape":
        if min(self) < 1:
            raise ShapeError(
                f"node {node_id}: non-positive dimension in shape {tuple(self)}", node_id
            )
        if self.size > _INDEX_LIMIT:
            raise ShapeError(
                f"node {node_id}: shape {tuple(self)} exceeds 32-bit index space", node_id
            )
        return self


@dataclass(frozen=True)
class LayerNode:
    """One layer of the model.

    ``weights`` maps slot names to payloads: ``weight``/``bias`` for conv-like
    nodes (dense arrays or a compact encoding of ``weight``), ``gamma``,
    ``beta``, ``mean``, ``var`` for BatchNorm, and ``layout`` for reordered
    pattern layers.
    """

    id: int
    kind: str
    attrs: Mapping[str, Any] = field(default_factory=dict)
    input_ids: tuple[int, ...] = ()
    weights: Mapping[str, Any] | None = None

    @property
    def kernel(self) -> tuple[int, int]:
        k = self.attrs.get("kernel", 1)
        if isinstance(k, int):
            return (k, k)
        return (int(k[0]), int(k[1]))

    @property
    def stride(self) -> int:
        return int(self.attrs.get("stride", 1))

    @property
    def padding(self) -> int:
        return int(self.attrs.get("padding", 0))

    @property
    def epilogue(self) -> dict | None:
        return self.attrs.get("epilogue")


@dataclass(frozen=True)
class GraphIR:
    nodes: tuple[LayerNode, ...]
    input_ids: tuple[int, ...]
    output_ids: tuple[int, ...]
    shapes: Mapping[int, TensorShape]

    def node(self, node_id: int) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def consumers(self, node_id: int) -> list[LayerNode]:
        return [n for n in self.nodes if node_id in n.input_ids]

    def weighted_nodes(self) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind in CONV_LIKE]

    def with_nodes(self, nodes) -> "GraphIR":
        """Rebuild from a node list, re-validating order and shapes."""
        return _assemble(list(nodes))

    def to_doc(self) -> dict:
        """Declarative document form (weights excluded)."""
        out = []
        for n in self.nodes:
            entry: dict[str, Any] = {"id": n.id, "kind": n.kind}
            if n.attrs:
                entry["attrs"] = _plain(dict(n.attrs))
            if n.input_ids:
                entry["inputs"] = list(n.input_ids)
            out.append(entry)
        return {"nodes": out}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def build_graph(doc: Mapping[str, Any], weights: Mapping[int, Mapping[str, Any]] | None = None) -> GraphIR:
    """Validate a graph document and return the corresponding `GraphIR`.

    ``weights`` optionally maps node id to that node's weight slots.
    """
    weights = weights or {}
    nodes = []
    seen = set()
    for entry in doc.get("nodes", []):
        nid = int(entry["id"])
        if nid in seen:
            raise GraphError(f"duplicate node id {nid}", nid)
        seen.add(nid)
        kind = entry["kind"]
        if kind not in NODE_KINDS:
            raise GraphError(f"node {nid}: unknown kind {kind!r}", nid)
        nodes.append(
            LayerNode(
                id=nid,
                kind=kind,
                attrs=dict(entry.get("attrs", {})),
                input_ids=tuple(int(i) for i in entry.get("inputs", ())),
                weights=weights.get(nid),
            )
        )
    return _assemble(nodes)


def _toposort(nodes: list[LayerNode]) -> list[LayerNode]:
    by_id = {n.id: n for n in nodes}
    indeg = {n.id: 0 for n in nodes}
    users: dict[int, list[int]] = {n.id: [] for n in nodes}
    for n in nodes:
        for src in n.input_ids:
            if src not in by_id:
                raise DanglingReferenceError(
                    f"node {n.id}: input references nonexistent node {src}", n.id
                )
            indeg[n.id] += 1
            users[src].append(n.id)
    heap = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        nid = heapq.heappop(heap)
        order.append(by_id[nid])
        for u in users[nid]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(heap, u)
    if len(order) != len(nodes):
        stuck = sorted(nid for nid, d in indeg.items() if d > 0)
        raise CycleError(f"cycle detected among nodes {stuck}", stuck[0])
    return order


def _assemble(nodes: list[LayerNode]) -> GraphIR:
    order = _toposort(nodes)
    inputs = tuple(n.id for n in order if n.kind == "Input")
    outputs = tuple(n.id for n in order if n.kind == "Output")
    g = GraphIR(tuple(order), inputs, outputs, {})
    shapes = infer_shapes(g)
    return replace(g, shapes=shapes)


def _expect_inputs(node: LayerNode, count: int) -> None:
    if len(node.input_ids) != count:
        raise GraphError(
            f"node {node.id} ({node.kind}) expects {count} input(s), got {len(node.input_ids)}",
            node.id,
        )


def infer_shapes(g: GraphIR) -> dict[int, TensorShape]:
    """Output shape of every node, keyed by node id."""
    shapes: dict[int, TensorShape] = {}
    for node in g.nodes:
        shapes[node.id] = _node_shape(node, [shapes[i] for i in node.input_ids]).check(node.id)
    return shapes


def _node_shape(node: LayerNode, ins: list[TensorShape]) -> TensorShape:
    kind, a = node.kind, node.attrs
    if kind == "Input":
        _expect_inputs(node, 0)
        return TensorShape(*(int(d) for d in a["shape"]))
    if kind == "Add":
        if len(ins) < 2:
            raise GraphError(f"node {node.id} (Add) needs at least 2 inputs", node.id)
        for s in ins[1:]:
            if s != ins[0]:
                raise ShapeError(
                    f"node {node.id} (Add): operand shapes differ, expected {tuple(ins[0])}, "
                    f"got {tuple(s)}",
                    node.id,
                )
        return ins[0]
    _expect_inputs(node, 1)
    x = ins[0]
    if kind in ("Output", "Activation"):
        if kind == "Activation" and a.get("fn", "relu") not in ACTIVATIONS:
            raise GraphError(f"node {node.id}: unknown activation {a.get('fn')!r}", node.id)
        return x
    if kind == "BatchNorm":
        c = int(a.get("channels", x.c))
        if c != x.c:
            raise ShapeError(
                f"node {node.id} (BatchNorm): expected {c} channels, got input shape {tuple(x)}",
                node.id,
            )
        return x
    if kind == "Upsample":
        f = int(a.get("factor", 2))
        return TensorShape(x.n, x.c, x.h * f, x.w * f)
    if kind == "Dense":
        in_f = int(a["in_features"])
        if x.c * x.h * x.w != in_f:
            raise ShapeError(
                f"node {node.id} (Dense): expected {in_f} input features, got shape {tuple(x)}",
                node.id,
            )
        return TensorShape(x.n, int(a["out_features"]), 1, 1)
    if kind in ("Conv2D", "DepthwiseConv2D"):
        in_c = int(a.get("in_channels", a.get("channels", 0)))
        if in_c != x.c:
            expected = (x.n, in_c, x.h, x.w)
            raise ShapeError(
                f"node {node.id} ({kind}): expected input shape {expected}, got {tuple(x)}",
                node.id,
            )
        out_c = in_c if kind == "DepthwiseConv2D" else int(a["out_channels"])
        kh, kw = node.kernel
        s, p = node.stride, node.padding
        oh = (x.h + 2 * p - kh) // s + 1
        ow = (x.w + 2 * p - kw) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"node {node.id} ({kind}): spatial size underflows to ({oh}, {ow}) "
                f"for input {tuple(x)}",
                node.id,
            )
        return TensorShape(x.n, out_c, oh, ow)
    raise GraphError(f"node {node.id}: unsupported kind {kind!r}", node.id)


def apply_activation(x: np.ndarray, spec: Mapping[str, Any] | None) -> np.ndarray:
    if not spec:
        return x
    fn = spec.get("fn", "relu")
    if fn == "relu":
        return np.maximum(x, np.float32(0))
    if fn == "leaky_relu":
        alpha = np.float32(spec.get("alpha", 0.01))
        return np.where(x >= 0, x, alpha * x)
    if fn == "tanh":
        return np.tanh(x)
    if fn == "identity":
        return x
    raise ValueError(f"unknown activation {fn!r}")


def _sole_consumer(g: GraphIR, node_id: int) -> LayerNode | None:
    users = g.consumers(node_id)
    if len(users) == 1 and users[0].input_ids.count(node_id) == 1:
        return users[0]
    return None


def _rewire(nodes: list[LayerNode], old: int, new: int) -> list[LayerNode]:
    return [
        replace(n, input_ids=tuple(new if i == old else i for i in n.input_ids))
        if old in n.input_ids
        else n
        for n in nodes
    ]


def _fold_bn(conv: LayerNode, bn: LayerNode) -> dict:
    w = np.asarray(conv.weights["weight"], dtype=np.float32)
    b = conv.weights.get("bias")
    out_c = w.shape[0]
    b = np.zeros(out_c, np.float32) if b is None else np.asarray(b, np.float32)
    p = bn.weights
    eps = np.float32(bn.attrs.get("eps", DEFAULT_BN_EPS))
    scale = (np.asarray(p["gamma"], np.float32)
             / np.sqrt(np.asarray(p["var"], np.float32) + eps)).astype(np.float32)
    bshape = (out_c,) + (1,) * (w.ndim - 1)
    w2 = (w * scale.reshape(bshape)).astype(np.float32)
    b2 = ((b - np.asarray(p["mean"], np.float32)) * scale + np.asarray(p["beta"], np.float32))
    return {**conv.weights, "weight": w2, "bias": b2.astype(np.float32)}


def fuse_conv_bn(g: GraphIR) -> GraphIR:
    """Fold every BatchNorm into its conv-like producer.

    Only fires when the BatchNorm is the producer's sole consumer, the producer
    has no activation epilogue yet, and both carry dense weights.
    """
    nodes = list(g.nodes)
    changed = False
    for conv in g.nodes:
        if conv.kind not in CONV_LIKE or conv.epilogue:
            continue
        bn = _sole_consumer(g, conv.id)
        if bn is None or bn.kind != "BatchNorm":
            continue
        if not conv.weights or not isinstance(conv.weights.get("weight"), np.ndarray) or not bn.weights:
            continue
        conv = next(n for n in nodes if n.id == conv.id)  # may have been rewired already
        fused = replace(conv, weights=_fold_bn(conv, bn), attrs={**conv.attrs, "bias": True})
        nodes = [fused if n.id == conv.id else n for n in nodes if n.id != bn.id]
        nodes = _rewire(nodes, bn.id, conv.id)
        changed = True
    return g.with_nodes(nodes) if changed else g


def fuse_conv_activation(g: GraphIR) -> GraphIR:
    """Absorb activations into their conv-like producer as an epilogue."""
    nodes = list(g.nodes)
    changed = False
    for act in g.nodes:
        if act.kind != "Activation" or len(act.input_ids) != 1:
            continue
        prod = next(n for n in nodes if n.id == act.input_ids[0])
        if prod.kind not in CONV_LIKE or prod.epilogue:
            continue
        if _sole_consumer(g, prod.id) is None:
            continue
        epi = {"fn": act.attrs.get("fn", "relu")}
        if epi["fn"] == "leaky_relu":
            epi["alpha"] = float(act.attrs.get("alpha", 0.01))
        fused = replace(prod, attrs={**prod.attrs, "epilogue": epi})
        nodes = [fused if n.id == prod.id else n for n in nodes if n.id != act.id]
        nodes = _rewire(nodes, act.id, prod.id)
        changed = True
    return g.with_nodes(nodes) if changed else g
