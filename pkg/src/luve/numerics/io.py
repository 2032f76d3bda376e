"""LUVT raw tensor files and LUVE named-tensor checkpoints.

LUVT layout: ``b"LUVT"``, u8 version (1), u8 dtype (0=f32, 1=f64), u8 rank,
rank x u32 little-endian extents, then the row-major little-endian payload.

LUVE layout: ``b"LUVE"``, u8 version (1), u32 record count, then per record
u32 name length, UTF-8 name, and an embedded LUVT tensor.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

from luve.errors import ContractError

TENSOR_MAGIC = b"LUVT"
CHECKPOINT_MAGIC = b"LUVE"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[arr.dtype]
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BBB", VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContractError("truncated LUVT/LUVE stream")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != TENSOR_MAGIC:
        raise ContractError("not a LUVT tensor (bad magic)")
    version, code, rank = struct.unpack("<BBB", _read_exact(fh, 3))
    if version != VERSION:
        raise ContractError(f"unsupported LUVT version {version}")
    if code not in _DTYPES:
        raise ContractError(f"unknown LUVT dtype code {code}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BI", VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, arr)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: not a LUVE checkpoint (bad magic)")
        version, count = struct.unpack("<BI", _read_exact(fh, 5))
        if version != VERSION:
            raise ContractError(f"unsupported LUVE checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, n).decode("utf-8")
            out[name] = read_tensor(fh)
        return out
