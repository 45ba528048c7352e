"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"CUCK"  u32 version  u32 count
    count x { u32 name_len, utf-8 name, u32 rank, rank x u64 dim,
              u8 dtype (0 = float64), payload }
    u32 crc32 of every preceding byte
"""
from __future__ import annotations

import math
import os
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CUCK"
VERSION = 1
DTYPE_F64 = 0
_DTYPES = {DTYPE_F64: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class CrcError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class DtypeError(CheckpointError):
    pass


class MagicError(CheckpointError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float64:
            raise DtypeError(f"{name}: only float64 tensors are stored, got {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", DTYPE_F64))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicError(f"not a checkpoint: magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 16:
        raise TruncatedError(f"file truncated: {len(buf)} bytes")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        # a cut-off file also fails the CRC; report it as truncation when the
        # declared structure needs more bytes than the file holds
        try:
            _parse(buf, strict=False)
        except TruncatedError:
            raise
        except (CheckpointError, UnicodeDecodeError, ValueError):
            pass
        raise CrcError(f"CRC mismatch: stored 0x{crc:08x}, computed 0x{zlib.crc32(body):08x}")
    return _parse(body)


def _parse(body: bytes, strict: bool = True) -> dict[str, np.ndarray]:
    r = _Reader(body)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if strict and version != VERSION:
        raise VersionError(f"checkpoint version {version}, this reader supports {VERSION}")
    (count,) = r.unpack("<I", "tensor count")
    out = {}
    for k in range(count):
        (n_name,) = r.unpack("<I", f"name length of tensor {k}")
        name = r.take(n_name, f"name of tensor {k}").decode("utf-8")
        (rank,) = r.unpack("<I", f"rank of {name}")
        shape = r.unpack(f"<{rank}Q", f"dims of {name}")
        (tag,) = r.unpack("<B", f"dtype of {name}")
        if tag not in _DTYPES:
            raise DtypeError(f"{name}: unknown dtype tag {tag}")
        dt = _DTYPES[tag]
        n_bytes = math.prod(shape) * dt.itemsize
        raw = r.take(n_bytes, f"payload of {name}")
        out[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.float64)
    if strict and r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after the last tensor")
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    data = encode(tensors)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())
