"""Little-endian framing for the package's binary artifact files.

Layout: 4-byte magic, u16 format version, payload, u32 CRC-32 of everything
before it. All numbers are little-endian; arrays are raw ``<f8``/``<i8``/``u1``.
"""

import io
import struct
import zlib

import numpy as np

from .errors import ArtifactError


class Writer:
    def __init__(self, magic, version):
        self._buf = io.BytesIO()
        self._buf.write(magic)
        self.u16(version)

    def u8(self, v):
        self._buf.write(struct.pack("<B", v))

    def u16(self, v):
        self._buf.write(struct.pack("<H", v))

    def u32(self, v):
        self._buf.write(struct.pack("<I", v))

    def u64(self, v):
        self._buf.write(struct.pack("<Q", v))

    def f64(self, v):
        self._buf.write(struct.pack("<d", v))

    def text(self, s):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self._buf.write(raw)

    def texts(self, items):
        self.u32(len(items))
        for s in items:
            self.text(s)

    def array(self, a, dtype="<f8"):
        a = np.ascontiguousarray(a, dtype=dtype)
        self.u8(a.ndim)
        for dim in a.shape:
            self.u64(dim)
        self._buf.write(a.tobytes())

    def getvalue(self):
        body = self._buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))


class Reader:
    def __init__(self, data, magic, versions=(1,), what="artifact"):
        if len(data) < len(magic) + 6:
            raise ArtifactError(f"{what}: file too short")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if body[: len(magic)] != magic:
            raise ArtifactError(f"{what}: bad magic {body[:len(magic)]!r}, expected {magic!r}")
        if zlib.crc32(body) != crc:
            raise ArtifactError(f"{what}: checksum mismatch (corrupt file)")
        self._what = what
        self._buf = io.BytesIO(body[len(magic):])
        self.version = self.u16()
        if self.version not in versions:
            raise ArtifactError(f"{what}: unsupported format version {self.version}")

    def _take(self, n):
        raw = self._buf.read(n)
        if len(raw) != n:
            raise ArtifactError(f"{self._what}: truncated payload")
        return raw

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u16(self):
        return struct.unpack("<H", self._take(2))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def text(self):
        n = self.u32()
        return self._take(n).decode("utf-8")

    def texts(self):
        return [self.text() for _ in range(self.u32())]

    def array(self, dtype="<f8"):
        ndim = self.u8()
        shape = tuple(self.u64() for _ in range(ndim))
        dt = np.dtype(dtype)
        count = int(np.prod(shape)) if shape else 1
        raw = self._take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def read_magic(path, n=4):
    with open(path, "rb") as fh:
        return fh.read(n)
