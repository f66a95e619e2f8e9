"""SFM v1 model files: a JSON graph document plus a little-endian weight blob.

Blob layout::

    b"SFMW"  u32 version  u32 record_count
    record*: u32 layer_id  u8 slot  u8 encoding_tag  u32 payload_len  payload

Slots: 0 weight, 1 bias, 2 gamma, 3 beta, 4 mean, 5 var, 6 layout.
Encoding tags: 0 dense, 1 column-compact, 2 pattern-packed, 3 row-compact,
4 reordered layout. Layout payloads hold the row permutation, group table and
column supports; group values are re-gathered from the layer's packed weights
on load so they are stored once.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .formats import (
    FormatError,
    PatternPackedWeights,
    decode_pattern,
    encoding_tag,
    from_bytes,
    storage_bytes,
    to_bytes,
)
from .graph import GraphError, GraphIR, build_graph
from .reorder import LayoutGroup, Permutation, ReorderedLayout

__all__ = [
    "SFMError",
    "SLOTS",
    "TAG_LAYOUT",
    "save_model",
    "load_model",
    "dump_graph",
    "layout_to_bytes",
    "layout_from_bytes",
    "layout_bytes",
    "model_bytes",
]

MAGIC = b"SFMW"
VERSION = 1
SLOTS = ("weight", "bias", "gamma", "beta", "mean", "var", "layout")
TAG_LAYOUT = 4


class SFMError(ValueError):
    pass


def layout_to_bytes(layout: ReorderedLayout) -> bytes:
    parts = [struct.pack("<III", layout.n_rows, layout.n_cols, len(layout.groups)),
             layout.row_perm.perm.astype("<u4").tobytes()]
    for g in layout.groups:
        parts.append(struct.pack("<III", g.start, g.stop, g.support.size))
        parts.append(g.support.astype("<u4").tobytes())
    return b"".join(parts)


def layout_bytes(layout: ReorderedLayout) -> int:
    return 12 + 4 * layout.n_rows + sum(12 + 4 * g.support.size for g in layout.groups)


def layout_from_bytes(buf: bytes, packed: PatternPackedWeights) -> ReorderedLayout:
    try:
        n_rows, n_cols, count = struct.unpack_from("<III", buf, 0)
        pos = 12
        perm = np.frombuffer(buf, "<u4", n_rows, pos).astype(np.int64)
        pos += 4 * n_rows
        dense = decode_pattern(packed).reshape(packed.out_c, -1)
        groups = []
        for _ in range(count):
            start, stop, s = struct.unpack_from("<III", buf, pos)
            pos += 12
            sup = np.frombuffer(buf, "<u4", s, pos).astype(np.int64)
            pos += 4 * s
            groups.append(LayoutGroup(start, stop, sup, dense[perm[start:stop]][:, sup]))
        if pos != len(buf):
            raise SFMError("trailing bytes in layout payload")
        return ReorderedLayout(n_rows, n_cols, Permutation.from_perm(perm), tuple(groups))
    except (struct.error, ValueError, IndexError) as exc:
        if isinstance(exc, SFMError):
            raise
        raise SFMError(f"malformed layout payload: {exc}") from exc


def _records(g: GraphIR) -> list[tuple[int, int, int, bytes]]:
    out = []
    for node in g.nodes:
        for slot, name in enumerate(SLOTS):
            obj = (node.weights or {}).get(name)
            if obj is None:
                continue
            if isinstance(obj, ReorderedLayout):
                out.append((node.id, slot, TAG_LAYOUT, layout_to_bytes(obj)))
            else:
                if isinstance(obj, np.ndarray) or np.isscalar(obj):
                    obj = np.asarray(obj, dtype=np.float32)
                out.append((node.id, slot, encoding_tag(obj), to_bytes(obj)))
    return out


def dump_graph(g: GraphIR, name: str = "", meta: dict | None = None) -> tuple[bytes, bytes]:
    """Serialize ``g`` to (JSON document bytes, blob bytes) without touching disk."""
    recs = _records(g)
    blob = [MAGIC, struct.pack("<II", VERSION, len(recs))]
    for nid, slot, tag, payload in recs:
        blob.append(struct.pack("<IBBI", nid, slot, tag, len(payload)))
        blob.append(payload)
    doc: dict[str, Any] = {"format": "SFM", "version": VERSION, "name": name,
                           "graph": g.to_doc(), "records": len(recs)}
    if meta:
        doc["meta"] = meta
    return json.dumps(doc, indent=1, sort_keys=True).encode() + b"\n", b"".join(blob)


def save_model(path, g: GraphIR, name: str = "", meta: dict | None = None) -> Path:
    """Write ``path`` (JSON) and ``path + '.bin'`` (weights)."""
    path = Path(path)
    doc, blob = dump_graph(g, name, meta)
    text = json.loads(doc)
    text["blob"] = path.name + ".bin"
    path.write_bytes(json.dumps(text, indent=1, sort_keys=True).encode() + b"\n")
    Path(str(path) + ".bin").write_bytes(blob)
    return path


def _parse_blob(blob: bytes) -> dict[int, dict[str, Any]]:
    if blob[:4] != MAGIC:
        raise SFMError("weight blob has a bad magic number")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
    except struct.error as exc:
        raise SFMError("truncated weight blob header") from exc
    if version != VERSION:
        raise SFMError(f"unsupported weight blob version {version}")
    pos = 12
    weights: dict[int, dict[str, Any]] = {}
    layouts = []
    for _ in range(count):
        try:
            nid, slot, tag, length = struct.unpack_from("<IBBI", blob, pos)
        except struct.error as exc:
            raise SFMError("truncated weight record header") from exc
        pos += struct.calcsize("<IBBI")
        payload = blob[pos:pos + length]
        if len(payload) != length:
            raise SFMError(f"truncated payload for layer {nid}")
        pos += length
        if slot >= len(SLOTS):
            raise SFMError(f"layer {nid}: unknown slot {slot}")
        if tag == TAG_LAYOUT:
            layouts.append((nid, payload))
            continue
        try:
            weights.setdefault(nid, {})[SLOTS[slot]] = from_bytes(tag, payload)
        except (FormatError, ValueError) as exc:
            raise SFMError(f"layer {nid}: {exc}") from exc
    if pos != len(blob):
        raise SFMError("trailing bytes in weight blob")
    for nid, payload in layouts:
        packed = weights.get(nid, {}).get("weight")
        if not isinstance(packed, PatternPackedWeights):
            raise SFMError(f"layer {nid}: layout record without pattern-packed weights")
        weights[nid]["layout"] = layout_from_bytes(payload, packed)
    return weights


def load_model(path) -> tuple[GraphIR, dict]:
    """Read an SFM model; returns the graph and the raw JSON document."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SFMError(f"cannot read model document {path}: {exc}") from exc
    if doc.get("format") != "SFM" or doc.get("version") != VERSION:
        raise SFMError(f"{path} is not an SFM v{VERSION} document")
    blob_path = path.parent / doc.get("blob", path.name + ".bin")
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise SFMError(f"cannot read weight blob {blob_path}: {exc}") from exc
    weights = _parse_blob(blob)
    try:
        g = build_graph(doc["graph"], weights)
    except (GraphError, KeyError) as exc:
        raise SFMError(f"invalid graph in {path}: {exc}") from exc
    return g, doc


def model_bytes(g: GraphIR) -> int:
    """Bytes of all weight payloads as stored in the blob."""
    total = 0
    for node in g.nodes:
        for obj in (node.weights or {}).values():
            if isinstance(obj, ReorderedLayout):
                total += layout_bytes(obj)
            elif obj is not None:
                total += storage_bytes(np.asarray(obj, np.float32) if isinstance(obj, np.ndarray) else obj)
    return total
