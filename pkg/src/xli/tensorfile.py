"""Single-file tensor container used for checkpoints and activation dumps.

Layout: magic, JSON meta block, tensor directory (name/dtype/shape/offset),
then raw little-endian payloads in directory order.  Writing the same meta
and tensors always produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ValidationError

MAGIC = b"XTNSR001"


def write_tensor_file(path: str | Path, meta: dict[str, Any], tensors: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    names = sorted(tensors)
    directory = bytearray()
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        dtype_str = arr.dtype.str.encode("ascii")
        name_bytes = name.encode("utf-8")
        directory += struct.pack("<H", len(name_bytes)) + name_bytes
        directory += struct.pack("<B", len(dtype_str)) + dtype_str
        directory += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            directory += struct.pack("<Q", dim)
        directory += struct.pack("<QQ", len(payload), arr.nbytes)
        payload += arr.tobytes()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<Q", len(meta_bytes))
    out += meta_bytes
    out += struct.pack("<I", len(names))
    out += directory
    out += payload
    Path(path).write_bytes(bytes(out))


def read_tensor_file(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValidationError(f"{path}: not a tensor container (bad magic)")
    pos = 8
    (meta_len,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_tensors,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries = []
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (dtype_len,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dtype = np.dtype(data[pos : pos + dtype_len].decode("ascii"))
        pos += dtype_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos) if ndim else ()
        pos += 8 * ndim
        offset, nbytes = struct.unpack_from("<QQ", data, pos)
        pos += 16
        entries.append((name, dtype, shape, offset, nbytes))
    base = pos
    tensors = {}
    for name, dtype, shape, offset, nbytes in entries:
        raw = data[base + offset : base + offset + nbytes]
        if len(raw) != nbytes:
            raise ValidationError(f"{path}: truncated payload for tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return meta, tensors
