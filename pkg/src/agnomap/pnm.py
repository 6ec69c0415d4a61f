"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InputError


def to_uint8(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode(img) -> bytes:
    img = to_uint8(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise InputError(f"cannot encode image of shape {img.shape} as PGM/PPM")
    h, w = img.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError("truncated PNM header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return out, pos + 1


def decode(data: bytes) -> np.ndarray:
    """uint8 array, (h, w) for P5 and (h, w, 3) for P6."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise InputError(f"unsupported PNM magic {magic!r}")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise InputError(f"only maxval 255 supported, got {maxval}")
    c = 3 if magic == b"P6" else 1
    raster = data[pos:pos + w * h * c]
    if len(raster) != w * h * c:
        raise InputError("truncated PNM raster")
    img = np.frombuffer(raster, dtype=np.uint8).reshape((h, w, c) if c == 3 else (h, w))
    return img.copy()


def write(path, img) -> None:
    Path(path).write_bytes(encode(img))


def read(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def read_float(path) -> np.ndarray:
    """(h, w, c) float32 in [0, 1]."""
    img = read(path).astype(np.float32) / 255.0
    return img[:, :, None] if img.ndim == 2 else img
