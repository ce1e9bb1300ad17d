"""Binary record container used for checkpoints, embeddings and backend
models, plus atomic file writing.

Layout (all integers little-endian):

    magic "AXVR" | u32 version | u32 header_len | header JSON (utf-8)
    u32 record_count
    per record: u16 name_len | name utf-8 | u8 ndim | u32 dims[ndim]
                | float64 little-endian values, C order

The float payload is written byte-exact, so a save/load round trip preserves
every value bit for bit.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"AXVR"
VERSION = 1


class FormatError(ValueError):
    """Raised when an on-disk artifact does not parse cleanly."""


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_records(path: str, header: dict, records: list[tuple[str, np.ndarray]]) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(header_bytes))
    buf += header_bytes
    buf += struct.pack("<I", len(records))
    for name, array in records:
        arr = np.asarray(array, dtype=np.float64)
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise ValueError(f"record name too long: {name[:40]}...")
        buf += struct.pack("<H", len(name_bytes))
        buf += name_bytes
        buf += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += np.ascontiguousarray(arr).astype("<f8", copy=False).tobytes()
    atomic_write_bytes(path, bytes(buf))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_records(path: str) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    with open(path, "rb") as handle:
        reader = _Reader(handle.read(), path)
    if reader.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a record file")
    version = reader.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header_len = reader.u32()
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    records = []
    for _ in range(reader.u32()):
        name = reader.take(reader.u16()).decode("utf-8")
        ndim = reader.u8()
        shape = tuple(reader.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        payload = reader.take(count * 8)
        array = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        records.append((name, array))
    if reader.pos != len(reader.data):
        raise FormatError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    return header, records
