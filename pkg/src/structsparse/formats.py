"""Compact storage for structured-sparse weights, plus a CSR baseline.

Byte layouts (little-endian, floats are IEEE binary32):

* dense:          u8 ndim, u32 dims[ndim], f32 data
* column-compact: u32 m, u32 n, u32 k, u32 kept_cols[k], f32 values[m*k]
* row-compact:    same payload as column-compact, holding the transpose
* pattern-packed: u32 out_c, in_c, kh, kw, u16 library_size, u16 retained,
                  library bitmasks (ceil(kh*kw/8) bytes each, row-major bit
                  order, LSB first), u16 pattern_id[out_c*in_c], f32 values
* csr:            u32 m, u32 nnz, u32 row_ptr[m+1], u32 col_idx[nnz],
                  f32 values[nnz]

`storage_bytes` returns exactly ``len(to_bytes(obj))``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .pruning import PatternLibrary

__all__ = [
    "FormatError",
    "SENTINEL",
    "TAG_DENSE",
    "TAG_COLUMN",
    "TAG_PATTERN",
    "TAG_ROW",
    "CompactColumnMatrix",
    "RowCompactMatrix",
    "PatternPackedWeights",
    "CsrMatrix",
    "encode_column",
    "decode_column",
    "encode_rows",
    "decode_rows",
    "encode_pattern",
    "decode_pattern",
    "encode_csr",
    "decode_csr",
    "storage_bytes",
    "to_bytes",
    "from_bytes",
    "encoding_tag",
]

SENTINEL = 0xFFFF
TAG_DENSE, TAG_COLUMN, TAG_PATTERN, TAG_ROW = 0, 1, 2, 3

_U32 = np.dtype("<u4")
_U16 = np.dtype("<u2")
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CompactColumnMatrix:
    """Column-pruned ``m x n`` matrix: only the ``k`` kept columns are stored."""

    m: int
    n: int
    kept_cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        kept = np.asarray(self.kept_cols, dtype=np.uint32).ravel()
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.size != self.m * kept.size:
            raise FormatError(f"values hold {vals.size} entries, expected {self.m}x{kept.size}")
        vals = vals.reshape(self.m, kept.size)
        if kept.size and (np.any(np.diff(kept.astype(np.int64)) <= 0) or kept[-1] >= self.n):
            raise FormatError("kept_cols must be strictly increasing and < n")
        object.__setattr__(self, "kept_cols", kept)
        object.__setattr__(self, "values", vals)

    @property
    def k(self) -> int:
        return int(self.kept_cols.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m, self.n)


class RowCompactMatrix(CompactColumnMatrix):
    """Filter-pruned matrix stored as the column-compact form of its transpose.

    ``m``/``n``/``kept_cols``/``values`` describe the transpose, so the kept
    *rows* of the original are ``kept_cols``.
    """

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.m)


@dataclass(frozen=True, eq=False)
class PatternPackedWeights:
    out_c: int
    in_c: int
    kh: int
    kw: int
    library: PatternLibrary
    pattern_ids: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.pattern_ids, dtype=np.uint16).reshape(self.out_c, self.in_c)
        vals = np.asarray(self.values, dtype=np.float32).ravel()
        alive = ids != SENTINEL
        if np.any(ids[alive] >= len(self.library)):
            raise FormatError("pattern id out of library range")
        if vals.size != int(alive.sum()) * self.library.retained:
            raise FormatError("values length does not match surviving kernels")
        object.__setattr__(self, "pattern_ids", ids)
        object.__setattr__(self, "values", vals)

    @property
    def surviving(self) -> int:
        return int(np.count_nonzero(self.pattern_ids != SENTINEL))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.out_c, self.in_c, self.kh, self.kw)

    def structural_mask(self) -> np.ndarray:
        """Boolean ``(out_c, in_c, kh, kw)`` mask of stored positions."""
        ids = self.pattern_ids.astype(np.int64)
        alive = ids != SENTINEL
        masks = self.library.masks[np.where(alive, ids, 0)]
        return masks & alive[..., None, None]


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    m: int
    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.size)


def _as_matrix(W) -> np.ndarray:
    W = np.asarray(W)
    if W.ndim != 2:
        raise FormatError(f"expected a 2-D matrix, got shape {W.shape}")
    return W.astype(np.float32, copy=False)


def encode_column(W, kept_cols) -> CompactColumnMatrix:
    """Gather the kept columns; raises if anything outside them is nonzero."""
    W = _as_matrix(W)
    m, n = W.shape
    kept = np.asarray(kept_cols, dtype=np.int64).ravel()
    if kept.size and (np.any(np.diff(kept) <= 0) or kept[0] < 0 or kept[-1] >= n):
        raise FormatError("kept_cols must be strictly increasing and within [0, n)")
    pruned = np.ones(n, dtype=bool)
    pruned[kept] = False
    bad = np.argwhere((W != 0) & pruned[None, :])
    if bad.size:
        r, c = bad[0]
        raise FormatError(f"nonzero {W[r, c]!r} at ({r}, {c}) in a pruned column")
    return CompactColumnMatrix(m, n, kept, W[:, kept])


def decode_column(c: CompactColumnMatrix) -> np.ndarray:
    out = np.zeros((c.m, c.n), dtype=np.float32)
    out[:, c.kept_cols.astype(np.intp)] = c.values
    return out


def encode_rows(W, kept_rows) -> RowCompactMatrix:
    c = encode_column(_as_matrix(W).T, kept_rows)
    return RowCompactMatrix(c.m, c.n, c.kept_cols, c.values)


def decode_rows(c: RowCompactMatrix) -> np.ndarray:
    return decode_column(c).T.copy()


def encode_pattern(W, library: PatternLibrary, pattern_ids=None) -> PatternPackedWeights:
    """Pack each kernel as one library id plus its retained values.

    Without ``pattern_ids`` every kernel gets the lowest-index mask covering
    its nonzeros; all-zero kernels get the sentinel. Passing ``pattern_ids``
    (``-1`` or `SENTINEL` for pruned kernels) keeps the structural assignment
    even for kernels that happen to be zero.
    """
    W = np.asarray(W, dtype=np.float32)
    if W.ndim != 4:
        raise FormatError(f"pattern encoding needs 4-D weights, got shape {W.shape}")
    out_c, in_c, kh, kw = W.shape
    if library.kernel_shape != (kh, kw):
        raise FormatError(f"library is {library.kernel_shape}, kernels are {(kh, kw)}")
    K = W.reshape(out_c * in_c, kh * kw)
    masks = library.masks.reshape(len(library), -1)
    nz = K != 0
    if pattern_ids is None:
        covered = ~np.any(nz[:, None, :] & ~masks[None, :, :], axis=2)
        has_any = covered.any(axis=1)
        first = np.argmax(covered, axis=1)
        empty = ~nz.any(axis=1)
        bad = np.flatnonzero(~has_any & ~empty)
        if bad.size:
            o, i = divmod(int(bad[0]), in_c)
            raise FormatError(f"kernel ({o}, {i}) matches no library mask")
        ids = np.where(empty, SENTINEL, first)
    else:
        ids = np.asarray(pattern_ids, dtype=np.int64).reshape(-1)
        ids = np.where((ids < 0) | (ids == SENTINEL), SENTINEL, ids)
        alive = ids != SENTINEL
        if np.any(ids[alive] >= len(library)):
            raise FormatError("pattern id out of library range")
        allowed = np.where(alive[:, None], masks[np.where(alive, ids, 0)], False)
        bad = np.flatnonzero(np.any(nz & ~allowed, axis=1))
        if bad.size:
            o, i = divmod(int(bad[0]), in_c)
            raise FormatError(f"kernel ({o}, {i}) has nonzeros outside its assigned mask")
    alive = ids != SENTINEL
    sel = masks[np.where(alive, ids, 0)][alive]
    values = K[alive][sel]
    return PatternPackedWeights(out_c, in_c, kh, kw, library, ids.reshape(out_c, in_c), values)


def decode_pattern(p: PatternPackedWeights) -> np.ndarray:
    out = np.zeros(p.shape, dtype=np.float32)
    out[p.structural_mask()] = p.values
    return out


def encode_csr(W) -> CsrMatrix:
    W = _as_matrix(W)
    m, n = W.shape
    rows, cols = np.nonzero(W)
    counts = np.bincount(rows, minlength=m)
    row_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.uint32)
    return CsrMatrix(m, n, row_ptr, cols.astype(np.uint32), W[rows, cols].astype(np.float32))


def decode_csr(c: CsrMatrix) -> np.ndarray:
    out = np.zeros((c.m, c.n), dtype=np.float32)
    rows = np.repeat(np.arange(c.m), np.diff(c.row_ptr.astype(np.int64)))
    out[rows, c.col_idx.astype(np.intp)] = c.values
    return out


def _mask_bytes(kh: int, kw: int) -> int:
    return (kh * kw + 7) // 8


def storage_bytes(obj) -> int:
    """Exact serialized size of any supported weight payload."""
    if isinstance(obj, CompactColumnMatrix):
        return 4 * obj.m * obj.k + 4 * obj.k + 12
    if isinstance(obj, CsrMatrix):
        return 4 * obj.nnz + 4 * obj.nnz + 4 * (obj.m + 1) + 8
    if isinstance(obj, PatternPackedWeights):
        lib = 4 + len(obj.library) * _mask_bytes(obj.kh, obj.kw)
        return 4 * obj.values.size + 2 * obj.out_c * obj.in_c + lib + 16
    if isinstance(obj, np.ndarray):
        return 4 * obj.size + 4 * obj.ndim + 1
    raise TypeError(f"no storage layout for {type(obj).__name__}")


def encoding_tag(obj) -> int:
    if isinstance(obj, RowCompactMatrix):
        return TAG_ROW
    if isinstance(obj, CompactColumnMatrix):
        return TAG_COLUMN
    if isinstance(obj, PatternPackedWeights):
        return TAG_PATTERN
    if isinstance(obj, np.ndarray):
        return TAG_DENSE
    raise TypeError(f"no encoding tag for {type(obj).__name__}")


def to_bytes(obj) -> bytes:
    if isinstance(obj, CompactColumnMatrix):
        return (struct.pack("<III", obj.m, obj.n, obj.k)
                + obj.kept_cols.astype(_U32).tobytes() + obj.values.astype(_F32).tobytes())
    if isinstance(obj, CsrMatrix):
        return (struct.pack("<II", obj.m, obj.nnz) + obj.row_ptr.astype(_U32).tobytes()
                + obj.col_idx.astype(_U32).tobytes() + obj.values.astype(_F32).tobytes())
    if isinstance(obj, PatternPackedWeights):
        lib = obj.library
        bits = lib.masks.reshape(len(lib), -1)
        masks = np.packbits(bits, axis=1, bitorder="little")
        return (struct.pack("<IIIIHH", obj.out_c, obj.in_c, obj.kh, obj.kw, len(lib), lib.retained)
                + masks.tobytes() + obj.pattern_ids.astype(_U16).tobytes()
                + obj.values.astype(_F32).tobytes())
    if isinstance(obj, np.ndarray):
        return (struct.pack("<B", obj.ndim) + np.asarray(obj.shape, _U32).tobytes()
                + np.ascontiguousarray(obj, dtype=_F32).tobytes())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated payload")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes in payload")


def from_bytes(tag: int, buf: bytes):
    r = _Reader(buf)
    if tag == TAG_DENSE:
        (ndim,) = r.unpack("<B")
        shape = tuple(int(d) for d in r.array(_U32, ndim))
        out = r.array(_F32, int(np.prod(shape))).astype(np.float32).reshape(shape)
    elif tag in (TAG_COLUMN, TAG_ROW):
        m, n, k = r.unpack("<III")
        kept = r.array(_U32, k)
        vals = r.array(_F32, m * k)
        cls = RowCompactMatrix if tag == TAG_ROW else CompactColumnMatrix
        out = cls(m, n, kept, vals.reshape(m, k))
    elif tag == TAG_PATTERN:
        out_c, in_c, kh, kw, size, retained = r.unpack("<IIIIHH")
        nb = _mask_bytes(kh, kw)
        raw = r.array(np.uint8, size * nb).reshape(size, nb)
        bits = np.unpackbits(raw, axis=1, count=kh * kw, bitorder="little").astype(bool)
        lib = PatternLibrary(bits.reshape(size, kh, kw))
        if lib.retained != retained:
            raise FormatError("library retained count mismatch")
        ids = r.array(_U16, out_c * in_c)
        alive = int(np.count_nonzero(ids != SENTINEL))
        vals = r.array(_F32, alive * retained)
        out = PatternPackedWeights(out_c, in_c, kh, kw, lib, ids, vals)
    else:
        raise FormatError(f"unknown encoding tag {tag}")
    r.done()
    return out
