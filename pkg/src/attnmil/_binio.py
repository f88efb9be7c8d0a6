"""Little-endian framing shared by the MILB and MILW containers.

Both formats are ``magic | u32 version | body | u32 CRC-32(everything before)``.
"""
from __future__ import annotations

import struct
import zlib
from typing import BinaryIO

import numpy as np

from .errors import BadMagicError, ChecksumError, TruncatedError, UnsupportedVersionError

_CHUNK = 1 << 20


class CrcWriter:
    def __init__(self, sink: BinaryIO):
        self.sink = sink
        self.crc = 0
        self.count = 0

    def write(self, data: bytes) -> None:
        self.sink.write(data)
        self.crc = zlib.crc32(data, self.crc)
        self.count += len(data)

    def u8(self, v: int) -> None:
        self.write(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self.write(struct.pack("<I", v))

    def f32(self, v: float) -> None:
        self.write(struct.pack("<f", v))

    def array(self, arr: np.ndarray, dtype: str) -> None:
        self.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def finish(self) -> int:
        self.sink.write(struct.pack("<I", self.crc))
        return self.count + 4


class CrcReader:
    def __init__(self, source: BinaryIO, what: str):
        self.source = source
        self.what = what
        self.crc = 0

    def read(self, n: int) -> bytes:
        # chunked so a corrupted length field cannot trigger a huge allocation
        parts = []
        remaining = n
        while remaining > 0:
            part = self.source.read(min(remaining, _CHUNK))
            if not part:
                raise TruncatedError(f"{self.what}: stream ended {remaining} bytes early")
            parts.append(part)
            remaining -= len(part)
        data = b"".join(parts)
        self.crc = zlib.crc32(data, self.crc)
        return data

    def u8(self) -> int:
        return self.read(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.read(4))[0]

    def array(self, count: int, dtype: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.read(count * itemsize), dtype=dtype).copy()

    def header(self, magic: bytes, version: int) -> None:
        got = self.read(len(magic))
        if got != magic:
            raise BadMagicError(f"{self.what}: expected magic {magic!r}, got {got!r}")
        v = self.u32()
        if v != version:
            raise UnsupportedVersionError(f"{self.what}: unsupported format version {v}")

    def verify(self) -> None:
        expected = self.crc
        trailer = self.source.read(4)
        if len(trailer) < 4:
            raise TruncatedError(f"{self.what}: missing CRC-32 trailer")
        (stored,) = struct.unpack("<I", trailer)
        if stored != expected:
            raise ChecksumError(f"{self.what}: CRC-32 mismatch (stored {stored:08x}, computed {expected:08x})")
