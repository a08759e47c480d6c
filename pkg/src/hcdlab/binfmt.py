"""Little-endian helpers shared by the HCDX / HCDT / HCDP file formats."""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    prime, mask = FNV_PRIME, _MASK
    for b in data:
        h = ((h ^ b) * prime) & mask
    return h


def f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def u32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<u4").tobytes()


def write_atomic(path: str | os.PathLike, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def check_magic(blob: bytes, magic: bytes, path) -> None:
    if len(blob) < len(magic) or blob[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic {blob[:len(magic)]!r}, expected {magic!r}")


def unpack_u32s(blob: bytes, offset: int, count: int, path) -> tuple[int, ...]:
    end = offset + 4 * count
    if len(blob) < end:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    return struct.unpack_from(f"<{count}I", blob, offset)


def split_checked_payload(blob: bytes, header_len: int, payload_len: int, path) -> bytes:
    """Return the payload after verifying total length and trailing checksum."""
    expected = header_len + payload_len + 8
    if len(blob) != expected:
        raise ChecksumError(
            f"{path}: file is {len(blob)} bytes but header declares {expected}; truncated or corrupt"
        )
    payload = blob[header_len: header_len + payload_len]
    (stored,) = struct.unpack_from("<Q", blob, header_len + payload_len)
    actual = fnv1a64(payload)
    if stored != actual:
        raise ChecksumError(f"{path}: checksum mismatch (stored {stored:#018x}, computed {actual:#018x})")
    return payload
