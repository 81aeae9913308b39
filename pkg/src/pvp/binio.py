"""Little-endian binary plumbing shared by the checkpoint and dataset formats:
an offset-tracking reader for structured parse errors, a CRC-32 trailer, and
atomic file writes (temp file + rename, never a truncated file at the final path).
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np

from .errors import FormatError, IntegrityError


class Reader:
    """Sequential reader over a byte buffer; raises FormatError with the
    current byte offset when a read runs past the end."""

    def __init__(self, buf: bytes, label: str):
        self.buf = buf
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.label}: truncated file, needed {n} more bytes",
                              offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32_array(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64)

    def utf8(self, n: int) -> str:
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.label}: invalid UTF-8 name", offset=self.pos - n)

    def expect_end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.label}: {len(self.buf) - self.pos} trailing bytes",
                              offset=self.pos)


def check_magic(buf: bytes, magic: bytes, kind: str) -> None:
    if len(buf) < len(magic) or buf[:len(magic)] != magic:
        raise FormatError(f"not a {kind} file (bad magic)")


def read_crc_trailer(r: Reader) -> None:
    """Consume the trailing CRC-32 and verify it over everything before it.

    Called after the structure parsed cleanly, so a mismatch means value
    corruption rather than truncation.
    """
    body_end = r.pos
    stored = r.u32()
    r.expect_end()
    actual = zlib.crc32(r.buf[:body_end]) & 0xFFFFFFFF
    if stored != actual:
        raise IntegrityError(
            f"{r.label}: checksum mismatch (stored {stored:#010x}, computed {actual:#010x})")


def with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def pack_u32(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def pack_f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
