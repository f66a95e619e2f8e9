"""Binary PPM (P6, maxval 255) <-> NCHW float32 tensors in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["ImageError", "read_ppm", "write_ppm", "decode_ppm", "encode_ppm"]


class ImageError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageError("malformed PPM header")
        out.append(buf[start:pos])
    return out, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic != b"P6":
        raise ImageError(f"not a binary PPM (magic {magic!r})")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageError("malformed PPM header") from exc
    if w < 1 or h < 1 or maxval != 255:
        raise ImageError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageError("malformed PPM header")
    data = buf[pos + 1:]
    need = w * h * 3
    if len(data) < need:
        raise ImageError(f"truncated PPM payload: {len(data)} of {need} bytes")
    px = np.frombuffer(data[:need], dtype=np.uint8).reshape(h, w, 3)
    return (px.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255)).astype(np.float32)


def encode_ppm(x) -> bytes:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 4:
        x = x[0]
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ImageError(f"expected a (1|3, H, W) image tensor, got {x.shape}")
    if x.shape[0] == 1:
        x = np.repeat(x, 3, axis=0)
    px = np.rint(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = px.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()


def read_ppm(path) -> np.ndarray:
    """Read a P6 image as a ``(1, 3, H, W)`` float32 tensor."""
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, x) -> None:
    """Write a tensor (values clipped to [0, 1]) as a P6 image."""
    Path(path).write_bytes(encode_ppm(x))
