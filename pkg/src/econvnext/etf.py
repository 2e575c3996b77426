"""ETF v1 binary tensor files.

Layout (little-endian): magic ``b"ETF1"``, u32 rank, rank x u32 dims,
u8 dtype code (0 = float32, 1 = float64), raw row-major payload.
"""
from __future__ import annotations

import os
import struct
from typing import Dict, Union

import numpy as np

MAGIC = b"ETF1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}

PathLike = Union[str, os.PathLike]


class ETFFormatError(ValueError):
    pass


def dumps(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_OF:
        raise ETFFormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    code = _CODE_OF[arr.dtype]
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", code)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ETFFormatError(f"bad magic {buf[:4]!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    (code,) = struct.unpack_from("<B", buf, off)
    off += 1
    if code not in _CODES:
        raise ETFFormatError(f"unknown dtype code {code}")
    dt = _CODES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != count * dt.itemsize:
        raise ETFFormatError(f"payload is {len(buf) - off} bytes, expected {count * dt.itemsize}")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def write(path: PathLike, arr) -> None:
    with open(path, "wb") as f:
        f.write(dumps(arr))


def read(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return loads(f.read())


def save_state(directory: PathLike, state: Dict[str, np.ndarray]) -> None:
    """Write one ``<name>.etf`` per entry of a parameter state dict."""
    os.makedirs(directory, exist_ok=True)
    for name, arr in state.items():
        write(os.path.join(directory, f"{name}.etf"), arr)


def load_state(directory: PathLike) -> Dict[str, np.ndarray]:
    out = {}
    for fn in sorted(os.listdir(directory)):
        if fn.endswith(".etf"):
            out[fn[:-4]] = read(os.path.join(directory, fn))
    return out
