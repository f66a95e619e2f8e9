"""Miniature, randomly initialized stand-ins for the demo applications.

* ``style-mini``: residual generator (strided encoder, residual blocks,
  nearest upsample decoder, tanh output).
* ``coloring-mini``: grayscale-in, RGB-out encoder-decoder with a depthwise
  stage.
* ``sr-mini``: wide-activation residual blocks and a 2x upsampling head with
  a global skip connection.

All three are untrained; they exercise the pipeline, not image quality.
"""

from __future__ import annotations

import numpy as np

from .graph import GraphIR, build_graph

__all__ = ["ZOO", "GraphBuilder", "generate", "random_graph"]


class GraphBuilder:
    """Incrementally assemble a graph document and its weights."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.nodes: list[dict] = []
        self.weights: dict[int, dict] = {}

    def _add(self, kind, inputs=(), attrs=None, weights=None) -> int:
        nid = len(self.nodes)
        entry = {"id": nid, "kind": kind, "inputs": list(inputs)}
        if attrs:
            entry["attrs"] = attrs
        self.nodes.append(entry)
        if weights:
            self.weights[nid] = weights
        return nid

    def _he(self, shape, fan_in) -> np.ndarray:
        return (self.rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)

    def _bias(self, n) -> np.ndarray:
        return (0.1 * self.rng.standard_normal(n)).astype(np.float32)

    def input(self, shape) -> int:
        return self._add("Input", attrs={"shape": list(shape)})

    def output(self, x) -> int:
        return self._add("Output", [x])

    def conv(self, x, in_c, out_c, k=3, stride=1, pad=None, bias=False) -> int:
        pad = k // 2 if pad is None else pad
        w = {"weight": self._he((out_c, in_c, k, k), in_c * k * k)}
        if bias:
            w["bias"] = self._bias(out_c)
        return self._add("Conv2D", [x], {"in_channels": in_c, "out_channels": out_c,
                                         "kernel": [k, k], "stride": stride, "padding": pad,
                                         "bias": bias}, w)

    def dwconv(self, x, c, k=3, stride=1, pad=None) -> int:
        pad = k // 2 if pad is None else pad
        w = {"weight": self._he((c, 1, k, k), k * k)}
        return self._add("DepthwiseConv2D", [x], {"channels": c, "kernel": [k, k],
                                                  "stride": stride, "padding": pad}, w)

    def dense(self, x, in_f, out_f, bias=True) -> int:
        w = {"weight": self._he((out_f, in_f), in_f)}
        if bias:
            w["bias"] = self._bias(out_f)
        return self._add("Dense", [x], {"in_features": in_f, "out_features": out_f,
                                        "bias": bias}, w)

    def bn(self, x, c, eps=1e-5) -> int:
        r = self.rng
        p = {
            "gamma": r.uniform(0.5, 1.5, c).astype(np.float32),
            "beta": (0.1 * r.standard_normal(c)).astype(np.float32),
            "mean": (0.1 * r.standard_normal(c)).astype(np.float32),
            "var": r.uniform(0.5, 1.5, c).astype(np.float32),
        }
        return self._add("BatchNorm", [x], {"channels": c, "eps": eps}, p)

    def act(self, x, fn="relu", alpha=0.1) -> int:
        attrs = {"fn": fn}
        if fn == "leaky_relu":
            attrs["alpha"] = alpha
        return self._add("Activation", [x], attrs)

    def add(self, *xs) -> int:
        return self._add("Add", xs)

    def upsample(self, x, factor=2) -> int:
        return self._add("Upsample", [x], {"mode": "nearest", "factor": factor})

    def conv_bn_act(self, x, in_c, out_c, k=3, stride=1, fn="relu") -> int:
        return self.act(self.bn(self.conv(x, in_c, out_c, k, stride), out_c), fn)

    def build(self) -> GraphIR:
        return build_graph({"nodes": self.nodes}, self.weights)


def _style_mini(b: GraphBuilder, size: int) -> None:
    x = b.input((1, 3, size, size))
    h = b.act(b.bn(b.conv(x, 3, 8, k=4, stride=2, pad=1), 8))
    h = b.conv_bn_act(h, 8, 16)
    for _ in range(2):
        r = b.conv_bn_act(h, 16, 16)
        r = b.bn(b.conv(r, 16, 16), 16)
        h = b.add(h, r)
    h = b.upsample(h, 2)
    h = b.conv_bn_act(h, 16, 8)
    b.output(b.act(b.conv(h, 8, 3, bias=True), "tanh"))


def _coloring_mini(b: GraphBuilder, size: int) -> None:
    x = b.input((1, 1, size, size))
    h = b.conv_bn_act(x, 1, 8)
    h = b.conv_bn_act(h, 8, 16, stride=2)
    h = b.act(b.bn(b.dwconv(h, 16), 16))
    h = b.conv_bn_act(h, 16, 16)
    h = b.upsample(h, 2)
    h = b.conv_bn_act(h, 16, 8)
    b.output(b.act(b.conv(h, 8, 3, bias=True), "tanh"))


def _sr_mini(b: GraphBuilder, size: int) -> None:
    x = b.input((1, 3, size, size))
    h = b.conv(x, 3, 8, bias=True)
    for _ in range(2):
        r = b.act(b.conv(h, 8, 16, bias=True))
        r = b.conv(r, 16, 8, bias=True)
        h = b.add(h, r)
    h = b.conv(b.upsample(h, 2), 8, 3, bias=True)
    b.output(b.add(h, b.upsample(x, 2)))


ZOO = {"style-mini": _style_mini, "coloring-mini": _coloring_mini, "sr-mini": _sr_mini}


def generate(name: str, seed: int = 42, size: int = 32) -> GraphIR:
    """Build a zoo model; identical for identical ``(name, seed, size)``."""
    if name not in ZOO:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(ZOO)}")
    if not 4 <= size <= 64 or size % 4:
        raise ValueError("size must be a multiple of 4 in [4, 64]")
    b = GraphBuilder(np.random.default_rng(seed))
    ZOO[name](b, size)
    return b.build()


def random_graph(rng: np.random.Generator, kernel3: bool = False, allow_dense: bool = True) -> GraphIR:
    """A small random valid graph: a conv chain with optional BN, activations,
    residual adds, one upsample, and a dense head.

    ``kernel3`` forces every Conv2D to 3x3 (needed for pattern pruning).
    """
    b = GraphBuilder(rng)
    c = int(rng.integers(1, 5))
    h = int(rng.integers(6, 11))
    w = int(rng.integers(6, 11))
    x = b.input((1, c, h, w))
    upsampled = False
    for _ in range(int(rng.integers(2, 5))):
        k = 3 if kernel3 or rng.random() < 0.7 else 1
        stride = 2 if (min(h, w) >= 8 and rng.random() < 0.25) else 1
        out_c = int(rng.integers(2, 9))
        y = b.conv(x, c, out_c, k=k, stride=stride, bias=bool(rng.random() < 0.5))
        h, w = (h + 2 * (k // 2) - k) // stride + 1, (w + 2 * (k // 2) - k) // stride + 1
        if rng.random() < 0.6:
            y = b.bn(y, out_c)
        r = rng.random()
        if r < 0.7:
            y = b.act(y, ["relu", "leaky_relu", "tanh", "identity"][int(rng.integers(0, 4))])
        if stride == 1 and out_c == c and rng.random() < 0.4:
            y = b.add(x, y)
        if not upsampled and rng.random() < 0.2:
            y = b.upsample(y, 2)
            h, w = 2 * h, 2 * w
            upsampled = True
        x, c = y, out_c
    if allow_dense and rng.random() < 0.3:
        x = b.dense(x, c * h * w, int(rng.integers(2, 9)))
    b.output(x)
    return b.build()
