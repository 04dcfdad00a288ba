"""Named-tensor binary checkpoints.

Layout (all integers little-endian)::

    b"WLCK" | u32 version | u32 header_len | header (UTF-8 JSON)
    u32 n_tensors
    repeated: u16 name_len | name | u8 ndim | u32 dims[ndim] | f64 values[prod(dims)]

The JSON header is written with sorted keys so identical inputs give identical bytes.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"WLCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors, header=None):
    buf = io.BytesIO()
    meta = json.dumps(header or {}, sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob):
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(bytes(view[pos:pos + hlen]).decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(view):
                raise CheckpointError(f"truncated tensor {name!r}")
            tensors[name] = np.frombuffer(view, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, header


def save(path, tensors, header=None):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, header))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
