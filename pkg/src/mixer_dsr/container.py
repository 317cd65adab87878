"""Versioned little-endian binary container for float64 arrays.

Layout (all integers little-endian)::

    b"MXDR" | u32 container_version
    u64 len | header JSON (utf-8, sorted keys)
    u32 n_arrays
    per array: u32 len | name (utf-8) | u32 ndim | ndim x u64 shape | u64 nbytes | float64 data
    u64 len | metadata JSON (empty object when absent)

JSON is written with sorted keys and no whitespace so equal inputs produce
byte-identical files.  The metadata section sits after every array so a
reader can stop before it.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MXDR"
CONTAINER_VERSION = 1

__all__ = ["ContainerError", "VersionMismatchError", "TruncatedFileError", "write_container", "read_container"]


class ContainerError(ValueError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def write_container(path, header: dict, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    chunks = [MAGIC, struct.pack("<I", CONTAINER_VERSION)]
    h = _dumps(header)
    chunks += [struct.pack("<Q", len(h)), h, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        chunks += [struct.pack("<I", len(nb)), nb, struct.pack("<I", a.ndim)]
        chunks += [struct.pack("<Q", n) for n in a.shape]
        raw = a.tobytes()
        chunks += [struct.pack("<Q", len(raw)), raw]
    m = _dumps(metadata or {})
    chunks += [struct.pack("<Q", len(m)), m]
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_container(path, expected_format: str | None = None, with_metadata: bool = True):
    """Return ``(header, arrays, metadata)``; metadata is ``None`` when not read."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise ContainerError(f"{path}: not a container file (bad magic)")
    version = r.u32()
    if version != CONTAINER_VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, expected {CONTAINER_VERSION}")
    try:
        header = json.loads(r.take(r.u64()))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header: {exc}") from None
    if expected_format is not None and header.get("format") != expected_format:
        raise ContainerError(f"{path}: expected format {expected_format!r}, got {header.get('format')!r}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u64() for _ in range(ndim))
        nbytes = r.u64()
        expected = 8 * int(np.prod(shape, dtype=np.int64))
        if nbytes != expected:
            raise TruncatedFileError(f"{path}: array {name!r} declares {nbytes} bytes, shape needs {expected}")
        arrays[name] = np.frombuffer(r.take(nbytes), dtype="<f8").reshape(shape).astype(np.float64)
    metadata = None
    if with_metadata:
        try:
            metadata = json.loads(r.take(r.u64()))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: corrupt metadata: {exc}") from None
        if r.pos != len(r.buf):
            raise ContainerError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return header, arrays, metadata
