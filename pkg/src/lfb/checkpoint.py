"""Named-parameter checkpoints in the bank's container style.

Layout (little-endian)::

    magic b"LFBP", u32 version = 1, u32 count,
    count x { u32 name_len, name (utf-8), u32 rank, rank x u32 dims, f32 data }
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .bank import BadMagicError, InconsistentBankError, TruncatedBankError, VersionMismatchError

MAGIC = b"LFBP"
VERSION = 1
_U32 = struct.Struct("<I")


def dumps(params: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(params))]
    for name, value in params.items():
        value = np.asarray(value)
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(value.ndim)]
        parts += [_U32.pack(n) for n in value.shape]
        parts.append(value.astype("<f4").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        if len(data) < 4:
            raise TruncatedBankError("checkpoint shorter than the magic number")
        raise BadMagicError(f"bad checkpoint magic {data[:4]!r}")
    pos = 4

    def u32():
        nonlocal pos
        if pos + 4 > len(data):
            raise TruncatedBankError("checkpoint ends early")
        (v,) = _U32.unpack_from(data, pos)
        pos += 4
        return v

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedBankError("checkpoint ends early")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version = u32()
    if version != VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise InconsistentBankError(f"{len(data) - pos} trailing bytes in checkpoint")
    return out


def save(path: str | os.PathLike, params: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(params))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
