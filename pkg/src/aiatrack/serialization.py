"""Flat binary container for named float64 tensors.

Layout (all integers little-endian)::

    b"AIAT"  u32 version  u32 count
    count x { u32 name_len, name (utf-8), u32 rank, rank x u64 extent, float64 data }
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"AIAT"
VERSION = 1


class FormatError(ValueError):
    pass


def write_tensors(stream: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    stream.write(MAGIC + struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        stream.write(struct.pack("<I", len(raw)) + raw)
        stream.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        stream.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _take(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError("truncated parameter file")
    return buf


def read_tensors(stream: BinaryIO) -> "OrderedDict[str, np.ndarray]":
    if _take(stream, 4) != MAGIC:
        raise FormatError("not a parameter file (bad magic)")
    version, count = struct.unpack("<II", _take(stream, 8))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<I", _take(stream, 4))
        name = _take(stream, n).decode("utf-8")
        (rank,) = struct.unpack("<I", _take(stream, 4))
        shape = struct.unpack(f"<{rank}Q", _take(stream, 8 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(_take(stream, 8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = data
    if stream.read(1):
        raise FormatError("trailing bytes after the last tensor")
    return out


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    return buf.getvalue()


def loads(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    return read_tensors(io.BytesIO(blob))


def save(path, module_or_tensors) -> None:
    tensors = module_or_tensors.state_dict() if hasattr(module_or_tensors, "state_dict") else module_or_tensors
    with open(Path(path), "wb") as fh:
        write_tensors(fh, tensors)


def load(path) -> "OrderedDict[str, np.ndarray]":
    with open(Path(path), "rb") as fh:
        return read_tensors(fh)
