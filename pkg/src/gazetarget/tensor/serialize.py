"""GZT1 binary tensor format.

Layout: the 4 magic bytes ``GZT1``, a little-endian u32 rank, one u32 per
extent, then the values as little-endian float32 in row-major order.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Union

import numpy as np

from .core import Tensor

MAGIC = b"GZT1"

PathOrFile = Union[str, os.PathLike, BinaryIO]


class FormatError(ValueError):
    pass


def dumps(value) -> bytes:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    arr = np.array(arr, dtype="<f4", order="C")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def loads(blob: bytes) -> np.ndarray:
    buf = io.BytesIO(blob)
    return _read(buf, len(blob))


def _read(fh: BinaryIO, total: int | None = None) -> np.ndarray:
    if fh.read(4) != MAGIC:
        raise FormatError("not a GZT1 tensor (bad magic)")
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated GZT1 header")
    (rank,) = struct.unpack("<I", raw)
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated GZT1 shape")
    shape = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError(f"GZT1 payload holds {len(payload) // 4} values, shape {shape} needs {count}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def save(value, target: PathOrFile) -> None:
    blob = dumps(value)
    if hasattr(target, "write"):
        target.write(blob)
    else:
        with open(target, "wb") as fh:
            fh.write(blob)


def load(source: PathOrFile) -> np.ndarray:
    if hasattr(source, "read"):
        return _read(source)
    with open(source, "rb") as fh:
        return _read(fh)
