"""Folding BatchNorm and ReLU into the preceding convolution."""
import numpy as np

from structsparse import build_graph, fuse_conv_activation, fuse_conv_bn, reference_run
from structsparse.kernels import max_rel_error

rng = np.random.default_rng(0)

doc = {"nodes": [
    {"id": 0, "kind": "Input", "attrs": {"shape": [1, 3, 16, 16]}},
    {"id": 1, "kind": "Conv2D", "inputs": [0],
     "attrs": {"in_channels": 3, "out_channels": 8, "kernel": [3, 3], "pad": 1}},
    {"id": 2, "kind": "BatchNorm", "inputs": [1], "attrs": {"channels": 8, "eps": 1e-5}},
    {"id": 3, "kind": "Activation", "inputs": [2], "attrs": {"fn": "relu"}},
    {"id": 4, "kind": "Output", "inputs": [3]},
]}
weights = {
    1: {"weight": rng.standard_normal((8, 3, 3, 3)).astype(np.float32)},
    2: {"gamma": rng.uniform(0.5, 2, 8).astype(np.float32),
        "beta": rng.standard_normal(8).astype(np.float32),
        "mean": rng.standard_normal(8).astype(np.float32),
        "var": rng.uniform(0.5, 2, 8).astype(np.float32)},
}
g = build_graph(doc, weights)
print("before:", [n.kind for n in g.nodes])

fused = fuse_conv_activation(fuse_conv_bn(g))
print("after: ", [n.kind for n in fused.nodes])
print("epilogue on conv:", fused.node(1).epilogue)

x = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
a, _ = reference_run(g, x)
b, _ = reference_run(fused, x)
print(f"max relative error {max_rel_error(b[4], a[4]):.2e}")
