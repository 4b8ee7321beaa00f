"""PUMT binary tensor container.

Layout (little-endian, no padding)::

    b"PUMT" | u32 version (=1) | u8 dtype code | u8 ndim | ndim x u64 dims | payload

dtype codes: 0 = float32, 1 = float64, 2 = int8.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"PUMT"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("i1")}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sIBB")


class ContainerError(ValueError):
    """Malformed, truncated or corrupted PUMT data."""


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in _CODE_OF:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    header = _HEADER.pack(MAGIC, VERSION, _CODE_OF[dt], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise ContainerError("truncated header")
    magic, version, code, ndim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    if code not in DTYPE_CODES:
        raise ContainerError(f"unknown dtype code {code}")
    offset = _HEADER.size + 8 * ndim
    if len(blob) < offset:
        raise ContainerError("truncated dimension table")
    shape = struct.unpack_from(f"<{ndim}Q", blob, _HEADER.size)
    dt = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise ContainerError(f"payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


def payload_crc32(blob: bytes) -> int:
    """CRC32 of the payload section of an encoded container."""
    ndim = blob[_HEADER.size - 1]
    return zlib.crc32(blob[_HEADER.size + 8 * ndim:])


def save(path: Union[str, Path], array: np.ndarray) -> int:
    """Write ``array`` to ``path`` and return the payload CRC32."""
    blob = encode(array)
    Path(path).write_bytes(blob)
    return payload_crc32(blob)


def load(path: Union[str, Path], crc32: int | None = None) -> np.ndarray:
    blob = Path(path).read_bytes()
    arr = decode(blob)
    if crc32 is not None and payload_crc32(blob) != crc32:
        raise ContainerError(f"checksum mismatch for {path}")
    return arr
