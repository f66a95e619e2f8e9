import json
import struct

import numpy as np
import pytest

from structsparse.kernels import ExecPlan, run_graph
from structsparse.pipeline import PruneConfig, compile_graph, prune_graph
from structsparse.sfm import SFMError, dump_graph, load_model, model_bytes, save_model
from structsparse.zoo import generate

PATTERN = {"type": "pattern", "kernel_h": 3, "kernel_w": 3, "retained_per_kernel": 4,
           "library_size": 6, "keep_ratio": 0.5}


def compiled_model(structure):
    g = generate("coloring-mini", size=16)
    pruned, _ = prune_graph(g, PruneConfig.from_dict({"method": "oneshot", "default": structure}))
    return compile_graph(pruned)[0]


@pytest.mark.parametrize("structure", [PATTERN, {"type": "column", "keep_ratio": 0.5},
                                       {"type": "filter", "keep_ratio": 0.5}])
def test_round_trip_preserves_bytes_and_outputs(tmp_path, structure):
    cg = compiled_model(structure)
    path = save_model(tmp_path / "m.sfm", cg, name="coloring-mini")
    g2, doc = load_model(path)
    assert doc["name"] == "coloring-mini"
    assert dump_graph(g2, "coloring-mini") == dump_graph(cg, "coloring-mini")
    assert model_bytes(g2) == model_bytes(cg)
    x = np.random.default_rng(0).random((1, 1, 16, 16), dtype=np.float32)
    a, _ = run_graph(cg, ExecPlan.for_graph(cg), x)
    b, _ = run_graph(g2, ExecPlan.for_graph(g2), x)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_blob_header_and_record_layout():
    g = generate("sr-mini", size=8)
    _, blob = dump_graph(g)
    assert blob[:4] == b"SFMW"
    version, count = struct.unpack_from("<II", blob, 4)
    assert version == 1
    nid, slot, tag, length = struct.unpack_from("<IBBI", blob, 12)
    first = g.nodes[1]
    assert (nid, slot, tag) == (first.id, 0, 0)
    assert length == 1 + 4 * 4 + 4 * first.weights["weight"].size


def test_model_bytes_equals_payload_sum():
    cg = compiled_model(PATTERN)
    _, blob = dump_graph(cg)
    _, count = struct.unpack_from("<II", blob, 4)
    assert len(blob) == 12 + count * 10 + model_bytes(cg)


@pytest.mark.parametrize("corrupt", ["magic", "truncate", "trailing", "json", "version", "graph"])
def test_invalid_files_raise(tmp_path, corrupt):
    g = generate("sr-mini", size=8)
    path = save_model(tmp_path / "m.sfm", g)
    blob_path = tmp_path / "m.sfm.bin"
    blob = blob_path.read_bytes()
    doc = json.loads(path.read_text())
    if corrupt == "magic":
        blob_path.write_bytes(b"XXXX" + blob[4:])
    elif corrupt == "truncate":
        blob_path.write_bytes(blob[:-3])
    elif corrupt == "trailing":
        blob_path.write_bytes(blob + b"\0")
    elif corrupt == "json":
        path.write_text("{not json")
    elif corrupt == "version":
        doc["version"] = 2
        path.write_text(json.dumps(doc))
    else:
        doc["graph"]["nodes"][1]["inputs"] = [99]
        path.write_text(json.dumps(doc))
    with pytest.raises(SFMError):
        load_model(path)


def test_missing_file(tmp_path):
    with pytest.raises(SFMError):
        load_model(tmp_path / "nope.sfm")
