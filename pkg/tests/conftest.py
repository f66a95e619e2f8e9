import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def conv_doc(in_shape, out_c=16, k=3, pad=1, stride=1, extra=()):
    """Input -> Conv2D -> [extra nodes] -> Output document."""
    nodes = [
        {"id": 0, "kind": "Input", "attrs": {"shape": list(in_shape)}},
        {"id": 1, "kind": "Conv2D", "inputs": [0],
         "attrs": {"in_channels": in_shape[1], "out_channels": out_c, "kernel": [k, k],
                   "stride": stride, "padding": pad}},
    ]
    last = 1
    for i, (kind, attrs) in enumerate(extra, start=2):
        nodes.append({"id": i, "kind": kind, "inputs": [last], "attrs": attrs})
        last = i
    nodes.append({"id": last + 1, "kind": "Output", "inputs": [last]})
    return {"nodes": nodes}
