"""Binary tensor container shared by model and map checkpoints.

Layout (all integers little-endian u32, all floats little-endian f32)::

    magic  b"AGNM1"
    kind   u32            0 = model, 1 = map
    nrec   u32
    record * nrec:
        tag     u32
        nints   u32, ints   u32 * nints
        ntens   u32, tensor * ntens
    tensor:
        ndim u32, dims u32 * ndim, data f32 * prod(dims)
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"AGNM1"
KIND_MODEL = 0
KIND_MAP = 1


@dataclass
class Record:
    tag: int
    ints: list[int] = field(default_factory=list)
    tensors: list[np.ndarray] = field(default_factory=list)


def _u32(buf, *vals):
    buf.write(struct.pack("<%dI" % len(vals), *vals))


def dumps(kind: int, records: list[Record]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, kind, len(records))
    for rec in records:
        _u32(buf, rec.tag, len(rec.ints), *rec.ints)
        _u32(buf, len(rec.tensors))
        for t in rec.tensors:
            t = np.asarray(t, dtype="<f4")
            _u32(buf, t.ndim, *t.shape)
            buf.write(np.ascontiguousarray(t).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise InputError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, n: int = 1) -> tuple[int, ...]:
        return struct.unpack("<%dI" % n, self.take(4 * n))


def loads(data: bytes) -> tuple[int, list[Record]]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise InputError("not an AGNM1 container (bad magic)")
    kind, nrec = r.u32(2)
    records = []
    for _ in range(nrec):
        tag, nints = r.u32(2)
        ints = list(r.u32(nints)) if nints else []
        (ntens,) = r.u32()
        tensors = []
        for _ in range(ntens):
            (ndim,) = r.u32()
            dims = r.u32(ndim) if ndim else ()
            count = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32)
            tensors.append(arr.reshape(dims))
        records.append(Record(tag, ints, tensors))
    if r.pos != len(data):
        raise InputError("trailing bytes after checkpoint records")
    return kind, records


def write(path, kind: int, records: list[Record]) -> None:
    Path(path).write_bytes(dumps(kind, records))


def read(path) -> tuple[int, list[Record]]:
    return loads(Path(path).read_bytes())
