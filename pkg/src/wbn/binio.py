"""Little-endian binary readers/writers shared by the dataset and checkpoint formats."""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def magic(self, tag: bytes):
        self.parts.append(tag)

    def u8(self, value: int):
        self.parts.append(struct.pack("<B", value))

    def u16(self, value: int):
        self.parts.append(struct.pack("<H", value))

    def u32(self, value: int):
        self.parts.append(struct.pack("<I", value))

    def u64(self, value: int):
        self.parts.append(struct.pack("<Q", value))

    def f64_array(self, arr: np.ndarray):
        self.parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def u16_array(self, arr: np.ndarray):
        self.parts.append(np.ascontiguousarray(arr, dtype="<u2").tobytes())

    def blob(self, raw: bytes):
        self.u32(len(raw))
        self.parts.append(raw)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    """Sequential reader that reports the byte offset of any malformation."""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def _take(self, count: int) -> bytes:
        if self.pos + count > len(self.raw):
            raise FormatError(
                f"file truncated: needed {count} bytes at offset {self.pos}, "
                f"have {len(self.raw) - self.pos}"
            )
        chunk = self.raw[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def magic(self, expected: bytes):
        offset = self.pos
        if self._take(len(expected)) != expected:
            raise FormatError(f"bad magic at offset {offset}: expected {expected!r}")

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64_array(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self._take(count * 8), dtype="<f8")
        return data.reshape(shape).astype(np.float64)

    def u16_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(count * 2), dtype="<u2").astype(np.int64)

    def blob(self) -> bytes:
        return self._take(self.u32())

    def expect_end(self):
        if self.pos != len(self.raw):
            raise FormatError(f"unexpected trailing bytes at offset {self.pos}")
