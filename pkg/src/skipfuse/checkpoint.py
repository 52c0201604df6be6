"""Flat binary checkpoint format.

Each record is::

    u32 name_length | name (utf-8) | u32 rank | u32 dim * rank | f32 data (row-major)

All integers and scalars are little-endian.  There is no header and no padding.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Mapping

import numpy as np

from .tensor import ContractError

_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


def write_records(fh: BinaryIO, tensors: Mapping[str, np.ndarray]):
    for name, array in tensors.items():
        array = np.asarray(array)
        raw_name = name.encode("utf-8")
        fh.write(_U32.pack(len(raw_name)))
        fh.write(raw_name)
        fh.write(_U32.pack(array.ndim))
        for dim in array.shape:
            fh.write(_U32.pack(dim))
        fh.write(np.ascontiguousarray(array, dtype=_F32).tobytes())


def read_records(fh: BinaryIO) -> dict[str, np.ndarray]:
    out = {}
    while True:
        head = fh.read(4)
        if not head:
            return out
        name = _read_exact(fh, _U32.unpack(head)[0]).decode("utf-8")
        rank = _U32.unpack(_read_exact(fh, 4))[0]
        shape = tuple(_U32.unpack(_read_exact(fh, 4))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(_read_exact(fh, 4 * count), dtype=_F32).reshape(shape)
        out[name] = data.astype(np.float32)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContractError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def save(path, tensors: Mapping[str, np.ndarray]):
    with open(path, "wb") as fh:
        write_records(fh, tensors)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_records(fh)
