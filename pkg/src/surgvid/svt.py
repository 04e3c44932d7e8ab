"""SVT1 tensor container.

Layout (little-endian, no padding)::

    0..3    magic b"SVT1"
    4       dtype code (1 = float32, 2 = uint8)
    5       ndim
    6..11   reserved, zero
    12..    ndim x u64 dims
    ...     row-major payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SVT1"
HEADER = struct.Struct("<4sBB6s")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2}


def _as_numpy(tensor) -> np.ndarray:
    if hasattr(tensor, "detach"):
        tensor = tensor.detach().cpu().numpy()
    return np.asarray(tensor)


def encode_tensor(tensor) -> bytes:
    arr = _as_numpy(tensor)
    code = CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; SVT stores float32 or uint8")
    if arr.ndim > 255:
        raise FormatError(f"too many dimensions ({arr.ndim})")
    head = HEADER.pack(MAGIC, code, arr.ndim, b"\0" * 6)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes", offset=len(buf))
    magic, code, ndim, reserved = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=4)
    if reserved != b"\0" * 6:
        raise FormatError("reserved bytes not zero", offset=6)
    dims_end = HEADER.size + 8 * ndim
    if len(buf) < dims_end:
        raise FormatError("truncated dims", offset=len(buf))
    dims = struct.unpack_from(f"<{ndim}Q", buf, HEADER.size)
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(buf) - dims_end
    if payload != expected:
        raise FormatError(
            f"payload holds {payload} bytes but header dims {tuple(dims)} need {expected}",
            offset=dims_end + min(payload, expected),
        )
    return np.frombuffer(buf, dtype=dtype, offset=dims_end).reshape(dims).copy()


def write_tensor(path, tensor) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensor(tensor))
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
