"""Framed little-endian binary files with a trailing CRC32.

Shared conventions for the dataset cache and training checkpoints:
an 8-byte magic, a u32 format version, length-prefixed payload fields,
and a u32 CRC over everything between the version and the checksum.
Readers verify magic, version, and checksum before trusting a byte.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import DataError


class Writer:
    def __init__(self, fh, magic: bytes, version: int):
        if len(magic) != 8:
            raise ValueError("magic must be 8 bytes")
        self._fh = fh
        self._crc = 0
        fh.write(magic)
        fh.write(struct.pack("<I", version))

    def _emit(self, data: bytes):
        self._crc = zlib.crc32(data, self._crc)
        self._fh.write(data)

    def u32(self, v):
        self._emit(struct.pack("<I", v))

    def u64(self, v):
        self._emit(struct.pack("<Q", v))

    def i64(self, v):
        self._emit(struct.pack("<q", v))

    def f64(self, v):
        self._emit(struct.pack("<d", v))

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self._emit(raw)

    def blob(self, raw: bytes):
        self.u64(len(raw))
        self._emit(raw)

    def array(self, a: np.ndarray):
        """Float64 array with its shape; byte payload is little-endian."""
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d,
        # and tobytes() already serializes in C order
        a = np.asarray(a, dtype="<f8")
        self.u32(a.ndim)
        for dim in a.shape:
            self.u64(dim)
        self._emit(a.tobytes())

    def int_array(self, a: np.ndarray):
        a = np.asarray(a, dtype="<i8")
        self.u32(a.ndim)
        for dim in a.shape:
            self.u64(dim)
        self._emit(a.tobytes())

    def finish(self):
        """Append the checksum. Call exactly once, last."""
        self._fh.write(struct.pack("<I", self._crc))


class Reader:
    def __init__(self, raw: bytes, magic: bytes, version: int, label: str):
        self.label = label
        if len(raw) < 16:
            raise DataError(f"{label}: file too short to be valid")
        if raw[:8] != magic:
            raise DataError(f"{label}: bad magic, not a {label} file")
        (got_version,) = struct.unpack_from("<I", raw, 8)
        if got_version != version:
            raise DataError(
                f"{label}: unsupported format version {got_version}, expected {version}")
        body = raw[12:-4]
        (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
        if zlib.crc32(body) != stored_crc:
            raise DataError(f"{label}: checksum mismatch, file is corrupted")
        self._body = body
        self._pos = 0

    def _take(self, n) -> bytes:
        if self._pos + n > len(self._body):
            raise DataError(f"{self.label}: truncated payload")
        out = self._body[self._pos:self._pos + n]
        self._pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def i64(self):
        return struct.unpack("<q", self._take(8))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def text(self) -> str:
        n = self.u32()
        return self._take(n).decode("utf-8")

    def blob(self) -> bytes:
        n = self.u64()
        return self._take(n)

    def array(self) -> np.ndarray:
        ndim = self.u32()
        shape = tuple(self.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(self._take(count * 8), dtype="<f8").astype(np.float64)
        return flat.reshape(shape)

    def int_array(self) -> np.ndarray:
        ndim = self.u32()
        shape = tuple(self.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(self._take(count * 8), dtype="<i8").astype(np.int64)
        return flat.reshape(shape)

    def done(self):
        if self._pos != len(self._body):
            raise DataError(f"{self.label}: {len(self._body) - self._pos} trailing bytes")
