"""Reference GEMM and im2col lowering.

`dense_gemm` accumulates in float32 over the inner dimension in ascending
order, one rank-1 update at a time. Every output element therefore sees the
same sequence of roundings as a naive triple loop, whatever the row split
across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

__all__ = ["dense_gemm", "im2col", "conv_output_size", "row_chunks"]


def row_chunks(m: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, min(workers, m))
    bounds = np.linspace(0, m, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _gemm_into(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    if out.size == 0:
        return
    at = np.ascontiguousarray(a.T)
    tmp = np.empty_like(out)
    for p in range(at.shape[0]):
        np.multiply(at[p][:, None], b[p][None, :], out=tmp)
        out += tmp


def dense_gemm(a, b, workers: int = 1) -> np.ndarray:
    """``a @ b`` in float32 with a fixed accumulation order."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    chunks = row_chunks(a.shape[0], workers)
    if len(chunks) <= 1:
        _gemm_into(a, b, out)
        return out
    with ThreadPoolExecutor(len(chunks)) as pool:
        list(pool.map(lambda ab: _gemm_into(a[ab[0]:ab[1]], b, out[ab[0]:ab[1]]), chunks))
    return out


def conv_output_size(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"invalid conv geometry: output spatial size ({oh}, {ow})")
    return oh, ow


def im2col(x, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Lower one ``(c, h, w)`` image to a ``(c*kh*kw, out_h*out_w)`` matrix.

    Row ``c*kh*kw + i*kw + j`` holds input channel ``c`` shifted by kernel
    offset ``(i, j)``; column ``r*out_w + s`` is output position ``(r, s)``.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError("im2col takes one image; loop over the batch")
        x = x[0]
    c, h, w = x.shape
    oh, ow = conv_output_size(h, w, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, oh * ow), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
            cols[:, i, j] = patch.reshape(c, -1)
    return cols.reshape(c * kh * kw, oh * ow)
