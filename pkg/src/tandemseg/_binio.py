"""Small helper for parsing little-endian binary files with offset-aware errors."""
from __future__ import annotations

import struct

from .errors import FormatError


class ByteReader:
    """Sequential reader over a bytes object; every failure names the byte offset."""

    def __init__(self, payload: bytes, source: str = "<bytes>"):
        self.payload = payload
        self.source = source
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.payload):
            raise FormatError(
                f"{self.source}: truncated {what} at offset {self.offset}: "
                f"need {n} bytes, {len(self.payload) - self.offset} remain")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def expect_magic(self, magic: bytes, what: str) -> None:
        got = self.take(len(magic), f"{what} magic")
        if got != magic:
            raise FormatError(
                f"{self.source}: bad {what} magic at offset 0: "
                f"expected {magic!r}, got {got!r}")

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, what: str) -> float:
        return struct.unpack("<f", self.take(4, what))[0]

    def expect_end(self, what: str) -> None:
        if self.offset != len(self.payload):
            raise FormatError(
                f"{self.source}: {len(self.payload) - self.offset} unexpected trailing "
                f"bytes after {what} at offset {self.offset}")
