"""Binary tensor container: the package's on-disk data plane.

Layout of one container, all integers little-endian:

    magic   4 bytes  b"OPS1"
    dtype   1 byte   1 = float32, 2 = float64
    ndim    1 byte
    dims    ndim * u32
    payload prod(dims) * itemsize bytes, row-major

A file may hold a single container (``save_tensor``/``load_tensor``) or a
back-to-back sequence (``save_tensors``/``load_tensors``), which is how
model weight blobs are stored. Round trips are bit-exact.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"OPS1"

_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def write_tensor(fh, arr: np.ndarray) -> None:
    """Append one container for ``arr`` (float32 or float64) to ``fh``."""
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.ndim > 255:
        raise FormatError("tensor rank exceeds container limit of 255")
    code = _DTYPE_TO_CODE[arr.dtype]
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes())


def read_tensor(fh) -> np.ndarray:
    """Read one container starting at the current offset of ``fh``."""
    start = fh.tell()
    magic = fh.read(4)
    if len(magic) < 4 or magic != MAGIC:
        raise FormatError(f"bad container magic {magic!r} at byte {start}")
    head = fh.read(2)
    if len(head) < 2:
        raise FormatError(f"truncated container header at byte {start + 4}")
    code, ndim = struct.unpack("<BB", head)
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code} at byte {start + 4}")
    dims = []
    for i in range(ndim):
        raw = fh.read(4)
        if len(raw) < 4:
            raise FormatError(f"truncated dims at byte {start + 6 + 4 * i}")
        dims.append(struct.unpack("<I", raw)[0])
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError(
            f"payload length {len(payload)} != expected {count * dtype.itemsize}"
            f" at byte {start + 6 + 4 * ndim}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    # native byte order copy so downstream math never sees '<f4' surprises
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        trailing = fh.read(1)
    if trailing:
        raise FormatError(f"trailing bytes after single-tensor container in {path}")
    return arr


def save_tensors(path, arrays) -> None:
    """Write a sequence of containers back to back (weights blob format)."""
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load_tensors(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        data = fh.read()
    fh = io.BytesIO(data)
    while fh.tell() < len(data):
        out.append(read_tensor(fh))
    return out
