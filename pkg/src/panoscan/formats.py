"""Binary containers and image export.

SSTF (named tensors)::

    b"SSTF" | u8 version | u32 n_arrays
    n x (u16 name_len | utf-8 name)                 name table
    n x (u8 rank | rank x u32 dim | f32 payload)    arrays, in name-table order

SSFT (one feature array)::

    b"SSFT" | u8 version | u8 rank | rank x u32 dim | f32 payload

SSPD (pairwise distances)::

    b"SSPD" | u32 n_patches | n(n-1)/2 x f32, pairs (i, j) with i < j in row-major order

Everything is little-endian and row-major.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import (DuplicateNameError, ElementCountError, HeaderError, MagicError,
                         NonFiniteError, UsageError, VersionError)

SSTF_MAGIC = b"SSTF"
SSFT_MAGIC = b"SSFT"
SSPD_MAGIC = b"SSPD"
VERSION = 1
_F32 = np.dtype("<f4")


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.data):
            raise HeaderError(f"{self.what}: truncated while reading {field}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))

    def payload(self, shape, name=None) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        available = (len(self.data) - self.pos) // 4
        if available < count:
            raise ElementCountError(count, available, name)
        arr = np.frombuffer(self.data, dtype=_F32, count=count, offset=self.pos).reshape(shape)
        self.pos += 4 * count
        return arr.astype(np.float32)


def _pack_array(arr) -> bytes:
    arr = np.asarray(arr, dtype=_F32)
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _read_shape(reader: _Reader, field: str):
    (rank,) = reader.unpack("<B", f"{field} rank")
    return reader.unpack(f"<{rank}I", f"{field} dims")


def _check_magic(reader: _Reader, magic: bytes):
    got = reader.take(4, "magic") if len(reader.data) >= 4 else reader.data
    if got != magic:
        raise MagicError(f"{reader.what}: bad magic {got!r}, expected {magic!r}")


def write_tensors(path, arrays: dict) -> None:
    """Write a mapping ``name -> array`` as SSTF (values stored as float32)."""
    names = list(arrays)
    if len(set(names)) != len(names):
        raise DuplicateNameError("array names must be unique")
    parts = [SSTF_MAGIC, struct.pack("<BI", VERSION, len(names))]
    for name in names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    for name in names:
        parts.append(_pack_array(arrays[name]))
    _atomic_write(path, b"".join(parts))


def read_tensors(path) -> dict:
    """Read an SSTF file into an ordered ``dict`` of float32 arrays."""
    reader = _Reader(Path(path).read_bytes(), f"SSTF {path}")
    _check_magic(reader, SSTF_MAGIC)
    version, count = reader.unpack("<BI", "header")
    if version != VERSION:
        raise VersionError(f"SSTF {path}: unsupported version {version}")
    names = []
    for i in range(count):
        (length,) = reader.unpack("<H", f"name {i} length")
        try:
            names.append(reader.take(length, f"name {i}").decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise HeaderError(f"SSTF {path}: name {i} is not valid utf-8") from exc
    if len(set(names)) != len(names):
        raise DuplicateNameError(f"SSTF {path}: duplicate array names")
    out = {}
    for name in names:
        shape = _read_shape(reader, f"array {name!r}")
        out[name] = reader.payload(shape, name)
    if reader.pos != len(reader.data):
        raise HeaderError(f"SSTF {path}: {len(reader.data) - reader.pos} trailing bytes after last array")
    return out


def write_feature_file(path, values) -> None:
    arr = np.asarray(values)
    if arr.ndim > 255:
        raise UsageError("rank must fit in one byte")
    _atomic_write(path, SSFT_MAGIC + struct.pack("<B", VERSION) + _pack_array(arr))


def read_feature_array(path) -> np.ndarray:
    """Parse an SSFT file, validating magic, version, element count and finiteness."""
    reader = _Reader(Path(path).read_bytes(), f"SSFT {path}")
    _check_magic(reader, SSFT_MAGIC)
    (version,) = reader.unpack("<B", "version")
    if version != VERSION:
        raise VersionError(f"SSFT {path}: unsupported version {version}")
    shape = _read_shape(reader, "feature")
    expected = int(np.prod(shape, dtype=np.int64))
    found = (len(reader.data) - reader.pos) // 4
    if found != expected or (len(reader.data) - reader.pos) % 4:
        raise ElementCountError(expected, found, str(path))
    arr = reader.payload(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"SSFT {path}: non-finite feature values")
    return arr


def write_pairwise(path, distances) -> None:
    """Write a symmetric ``n x n`` distance matrix as SSPD (upper triangle only)."""
    d = np.asarray(distances)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise UsageError(f"distance matrix must be square, got {d.shape}")
    iu = np.triu_indices(d.shape[0], k=1)
    _atomic_write(path, SSPD_MAGIC + struct.pack("<I", d.shape[0]) + d[iu].astype(_F32).tobytes())


def read_pairwise(path) -> np.ndarray:
    """Read SSPD into a symmetric float32 matrix with a zero diagonal."""
    reader = _Reader(Path(path).read_bytes(), f"SSPD {path}")
    _check_magic(reader, SSPD_MAGIC)
    (n,) = reader.unpack("<I", "patch count")
    count = n * (n - 1) // 2
    found = (len(reader.data) - reader.pos) // 4
    if found != count or (len(reader.data) - reader.pos) % 4:
        raise ElementCountError(count, found, str(path))
    upper = reader.payload((count,))
    if not np.all(np.isfinite(upper)):
        raise NonFiniteError(f"SSPD {path}: non-finite distances")
    out = np.zeros((n, n), dtype=np.float32)
    iu = np.triu_indices(n, k=1)
    out[iu] = upper
    out[(iu[1], iu[0])] = upper
    return out


def to_bytes_8bit(array) -> np.ndarray:
    """Clamp to [0, 1] and quantise with round-half-up."""
    arr = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise UsageError("cannot export non-finite values")
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_image(array, path) -> None:
    """Write binary PPM (3 channels) or PGM (1 channel) with maxval 255."""
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise UsageError(f"export supports 1 or 3 channels, got shape {np.shape(array)}")
    magic = b"P6" if arr.shape[2] == 3 else b"P5"
    h, w = arr.shape[:2]
    body = to_bytes_8bit(arr).tobytes()
    _atomic_write(path, magic + f"\n{w} {h}\n255\n".encode("ascii") + body)


def read_image(path) -> np.ndarray:
    """Read a binary PGM/PPM written by ``export_image`` into floats in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise HeaderError(f"{path}: truncated PNM header")
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise HeaderError(f"{path}: only 8-bit binary P5/P6 is supported")
    channels = 3 if magic == b"P6" else 1
    expected = w * h * channels
    body = np.frombuffer(data, dtype=np.uint8, offset=pos)
    if body.size != expected:
        raise ElementCountError(expected, body.size, str(path))
    return body.reshape(h, w, channels).astype(np.float64) / 255.0


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
