"""Binary weight container (.cpwt) reader/writer.

Layout, all little-endian:

    magic "CPWT" | version u32 | tensor count u32
    per tensor: name length u16, UTF-8 name, rank u8, extents u32 each,
                raw float32 values row-major
    trailing CRC32 over every preceding byte

Tensors come back as read-only float32 views so a loaded store can be
shared across threads without defensive copies.
"""

from __future__ import annotations

import struct
import zlib
from collections.abc import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"CPWT"
VERSION = 1


class WeightStore(dict):
    """Named float32 tensors backing a model graph. Plain dict, insertion
    order preserved; treat as immutable once loaded."""


def serialize_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Encode named tensors into container bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        if arr.ndim < 1 or arr.ndim > 255:
            raise FormatError(f"tensor '{name}' has unsupported rank {arr.ndim}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name too long ({len(encoded)} bytes)")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_weights(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_weights(tensors))


class _Reader:
    """Cursor over container bytes that turns short reads into FormatError."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated {self.what}: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_weights(data: bytes) -> WeightStore:
    """Decode container bytes; verifies magic, version, and CRC32."""
    if len(data) < 4:
        raise FormatError("weight container shorter than its magic")
    if data[:4] != MAGIC:
        raise FormatError(f"bad weight container magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 16:
        raise FormatError("weight container truncated before header")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual_crc = zlib.crc32(data[:-4])
    if stored_crc != actual_crc:
        raise FormatError(
            f"weight container checksum mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}"
        )
    rd = _Reader(data[:-4], "weight container")
    rd.take(4)
    version, count = rd.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported weight container version {version}")
    store = WeightStore()
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        (rank,) = rd.unpack("<B")
        shape = rd.unpack(f"<{rank}I")
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = rd.take(4 * n)
        arr = np.frombuffer(raw, dtype="<f4", count=n).reshape(shape)
        store[name] = arr  # read-only view into the input buffer
    if rd.pos != len(rd.data):
        raise FormatError(
            f"weight container has {len(rd.data) - rd.pos} trailing bytes "
            f"after the declared {count} tensors"
        )
    return store


def read_weights(path) -> WeightStore:
    with open(path, "rb") as fh:
        return parse_weights(fh.read())
