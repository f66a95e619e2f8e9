"""Graph-level pruning and compilation.

``prune_graph`` applies a pruning config to every eligible layer and records
the resolved structure in the node's ``structure`` attribute. ``compile_graph``
fuses BatchNorm and activations, then encodes each structured layer in its
compact format (reordered layout for pattern/connectivity layers).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np

from .formats import encode_column, encode_pattern, encode_rows
from .graph import GraphError, GraphIR, LayerNode, fuse_conv_activation, fuse_conv_bn
from .kernels import ExecPlan, pattern_layout, run_graph
from .objectives import LayerReconstruction
from .pruning import (
    AdmmConfig,
    Channel,
    Column,
    Connectivity,
    Filter,
    Pattern,
    PatternLibrary,
    PruneTask,
    PruningError,
    admm_prune,
    project,
    resolve_structure,
    sparsity_report,
    structure_from_dict,
    structure_to_dict,
    support,
)

log = logging.getLogger(__name__)

__all__ = [
    "ConstraintViolation",
    "PruneConfig",
    "eligible",
    "prune_graph",
    "compile_graph",
]

PRUNABLE = ("Conv2D", "Dense")


class ConstraintViolation(GraphError):
    """A layer's weights do not satisfy the structure it claims."""


@dataclass
class PruneConfig:
    """Pruning settings.

    ``default`` applies to every compatible Conv2D/Dense layer; ``layers``
    overrides per node id (``None`` leaves a layer dense). ``method`` is
    ``"admm"`` (layer-wise reconstruction objective) or ``"oneshot"``
    (projection only).
    """

    default: dict | None = None
    layers: dict[int, dict | None] = field(default_factory=dict)
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    method: str = "admm"
    calibration_batch: int = 2
    calibration_seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PruneConfig":
        method = d.get("method", "admm")
        if method not in ("admm", "oneshot"):
            raise PruningError(f"unknown pruning method {method!r}")
        cal = d.get("calibration", {})
        cfg = cls(
            default=d.get("default"),
            layers={int(k): v for k, v in d.get("layers", {}).items()},
            admm=AdmmConfig(**d.get("admm", {})),
            method=method,
            calibration_batch=int(cal.get("batch", 2)),
            calibration_seed=int(cal.get("seed", 0)),
        )
        for s in [cfg.default, *cfg.layers.values()]:
            if s is not None:
                structure_from_dict(s)
        return cfg

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "default": self.default,
            "layers": {str(k): v for k, v in sorted(self.layers.items())},
            "admm": vars(self.admm).copy(),
            "calibration": {"batch": self.calibration_batch, "seed": self.calibration_seed},
        }


def eligible(node: LayerNode, s) -> bool:
    if node.kind not in PRUNABLE:
        return False
    if isinstance(s, (Pattern, Connectivity)):
        if node.kind != "Conv2D":
            return False
        if isinstance(s, Pattern) and node.kernel != (s.kernel_h, s.kernel_w):
            return False
    return True


def _targets(g: GraphIR, cfg: PruneConfig) -> dict[int, Any]:
    out = {}
    for node in g.nodes:
        if node.kind not in PRUNABLE:
            continue
        d = cfg.layers[node.id] if node.id in cfg.layers else cfg.default
        if d is None:
            continue
        s = structure_from_dict(d)
        if not eligible(node, s):
            if node.id in cfg.layers:
                raise PruningError(f"node {node.id} ({node.kind}, kernel {node.kernel}) "
                                   f"cannot take {d['type']} pruning")
            log.info("node %d skipped: %s not applicable", node.id, d["type"])
            continue
        out[node.id] = s
    return out


def _calibration(g: GraphIR, cfg: PruneConfig, targets) -> dict[int, np.ndarray]:
    rng = np.random.default_rng(cfg.calibration_seed)
    lowered: dict[int, list[np.ndarray]] = {i: [] for i in targets}
    for _ in range(cfg.calibration_batch):
        inputs = {i: rng.random(tuple(g.shapes[i]), dtype=np.float32) for i in g.input_ids}
        seen: dict[int, np.ndarray] = {}
        run_graph(g, ExecPlan.for_graph(g), inputs, capture=seen)
        for i in targets:
            node = g.node(i)
            x = seen[node.input_ids[0]]
            lowered[i].append(LayerReconstruction.lower(node.kind, x, node.kernel,
                                                        node.stride, node.padding))
    return {i: np.concatenate(v, axis=1) for i, v in lowered.items()}


def prune_graph(g: GraphIR, cfg: PruneConfig) -> tuple[GraphIR, dict]:
    """Prune every targeted layer; returns the pruned graph and a JSON-ready report."""
    targets = _targets(g, cfg)
    original = {i: np.asarray(g.node(i).weights["weight"], np.float32) for i in targets}
    residuals: dict[int, list[float]] = {}
    losses: list[float] = []
    final_loss = None
    if cfg.method == "admm" and targets:
        loss = LayerReconstruction(original, _calibration(g, cfg, targets))
        res = admm_prune(PruneTask(original, targets, loss), cfg.admm)
        weights, structures = res.weights, res.structures
        residuals, losses, final_loss = res.residuals, res.losses, res.final_loss
    else:
        structures = {i: resolve_structure(original[i], s) for i, s in targets.items()}
        weights = {i: project(original[i], structures[i]) for i, s in structures.items()}

    nodes = []
    for node in g.nodes:
        if node.id in structures:
            node = replace(
                node,
                attrs={**node.attrs, "structure": structure_to_dict(structures[node.id])},
                weights={**node.weights, "weight": np.asarray(weights[node.id], np.float32)},
            )
        nodes.append(node)
    pruned = g.with_nodes(nodes)
    per_layer = sparsity_report({i: pruned.node(i).weights["weight"] for i in structures},
                                structures)
    report = {
        "method": cfg.method,
        "layers": {
            str(i): {
                "kind": g.node(i).kind,
                "structure": structure_to_dict(structures[i]),
                **per_layer[i],
                "residuals": residuals.get(i, []),
            }
            for i in sorted(structures)
        },
        "loss": losses,
        "final_loss": final_loss,
    }
    return pruned, report


def _encode_node(node: LayerNode) -> LayerNode:
    W = np.asarray(node.weights["weight"], np.float32)
    try:
        s = resolve_structure(W, structure_from_dict(node.attrs["structure"]))
        sup = support(W, s)
    except PruningError as exc:
        raise ConstraintViolation(f"node {node.id}: {exc}", node.id) from exc
    if not np.array_equal(np.where(sup.mask, W, np.float32(0)), W):
        bad = tuple(int(v) for v in np.argwhere((W != 0) & ~sup.mask)[0])
        raise ConstraintViolation(
            f"node {node.id} ({node.kind}): weights violate {node.attrs['structure']['type']} "
            f"structure at index {bad}",
            node.id,
        )
    flat = W.reshape(W.shape[0], -1)
    weights = dict(node.weights)
    if isinstance(s, Column):
        weights["weight"] = encode_column(flat, sup.kept)
    elif isinstance(s, Channel):
        per = int(np.prod(W.shape[2:])) if W.ndim == 4 else 1
        cols = (sup.kept[:, None] * per + np.arange(per)[None, :]).ravel()
        weights["weight"] = encode_column(flat, cols)
    elif isinstance(s, Filter):
        weights["weight"] = encode_rows(flat, sup.kept)
    else:
        if isinstance(s, Connectivity):
            lib = PatternLibrary.full(W.shape[2], W.shape[3])
        else:
            lib = s.library
        packed = encode_pattern(W, lib, sup.pattern_ids)
        weights["weight"] = packed
        weights["layout"] = pattern_layout(packed)
    return replace(node, weights=weights)


def compile_graph(g: GraphIR, workers: int = 1) -> tuple[GraphIR, ExecPlan]:
    """Fuse, encode and reorder; returns the compiled graph and its execution plan."""
    g = fuse_conv_activation(fuse_conv_bn(g))
    nodes = []
    for node in g.nodes:
        w = (node.weights or {}).get("weight")
        if node.kind in PRUNABLE and "structure" in node.attrs and isinstance(w, np.ndarray):
            node = _encode_node(node)
        nodes.append(node)
    cg = g.with_nodes(nodes)
    return cg, ExecPlan.for_graph(cg, workers)
