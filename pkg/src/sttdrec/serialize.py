"""Binary chunk format shared by core sets and parameter checkpoints.

Layout::

    magic (8 bytes) | version u32 LE | header length u32 LE | header (UTF-8 JSON)
    | payloads: float32 little-endian, row-major, in header manifest order

The header's ``tensors`` list names each payload with its extents.
"""
from __future__ import annotations

import json
import math
import struct
from typing import BinaryIO, Mapping

import numpy as np

FORMAT_VERSION = 1


def write_chunk(fh: BinaryIO, magic: bytes, header: dict,
                tensors: Mapping[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    header = dict(header)
    header["tensors"] = [{"name": k, "extents": list(np.shape(v))} for k, v in tensors.items()]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(magic)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(raw)))
    fh.write(raw)
    for v in tensors.values():
        arr = np.ascontiguousarray(v, dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("refusing to write non-finite tensor entries")
        fh.write(arr.tobytes())


def read_chunk(fh: BinaryIO, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    got = fh.read(8)
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")
    head = fh.read(8)
    if len(head) != 8:
        raise ValueError("truncated chunk header")
    version, hlen = struct.unpack("<II", head)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    header = json.loads(fh.read(hlen).decode("utf-8"))
    tensors = {}
    for entry in header["tensors"]:
        ext = tuple(entry["extents"])
        count = math.prod(ext)
        buf = fh.read(4 * count)
        if len(buf) != 4 * count:
            raise ValueError(f"truncated payload for {entry['name']!r}")
        arr = np.frombuffer(buf, dtype="<f4").reshape(ext).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite entries in {entry['name']!r}")
        tensors[entry["name"]] = arr
    return header, tensors
