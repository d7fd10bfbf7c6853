"""Binary grid files.

Layout, all little-endian::

    0   4s   magic b"SCDG"
    4   u16  version (1)
    6   u16  dtype code: 1 = float32, 2 = float64
    8   u32  height
    12  u32  width
    16  u16  channels
    18  ...  payload, row-major with channels interleaved (H, W, C)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCDG"
VERSION = 1
HEADER = struct.Struct("<4sHHIIH")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class GridFormatError(ValueError):
    pass


def _as_hwc(grid: np.ndarray, channels_first: bool) -> np.ndarray:
    if grid.ndim == 2:
        return grid[:, :, None]
    if grid.ndim == 3:
        return np.moveaxis(grid, 0, -1) if channels_first else grid
    raise ValueError(f"grid must be 2-D or 3-D, got shape {grid.shape}")


def encode_grid(grid, dtype="float64", channels_first: bool = False) -> bytes:
    """Serialise ``(H, W)`` or ``(H, W, C)`` (``(C, H, W)`` with ``channels_first``)."""
    dt = np.dtype(dtype)
    if dt not in CODES:
        raise ValueError(f"unsupported dtype {dt}")
    arr = _as_hwc(np.asarray(grid), channels_first)
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid contains non-finite values")
    H, W, C = arr.shape
    header = HEADER.pack(MAGIC, VERSION, CODES[dt], H, W, C)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[CODES[dt]]).tobytes()


def decode_grid(data: bytes, channels_first: bool = False, name: str = "<bytes>") -> np.ndarray:
    """Inverse of :func:`encode_grid`; 2-D for single-channel grids."""
    if len(data) < HEADER.size:
        raise GridFormatError(f"{name}: truncated header")
    magic, version, code, H, W, C = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise GridFormatError(f"{name}: bad magic {magic!r}")
    if version != VERSION:
        raise GridFormatError(f"{name}: unsupported version {version}")
    if code not in DTYPES:
        raise GridFormatError(f"{name}: unknown dtype code {code}")
    dt = DTYPES[code]
    expected = H * W * C * dt.itemsize
    payload = data[HEADER.size:]
    if len(payload) != expected:
        raise GridFormatError(f"{name}: payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dt).reshape(H, W, C).astype(dt.newbyteorder("="))
    if C == 1:
        return arr[:, :, 0]
    return np.moveaxis(arr, -1, 0).copy() if channels_first else arr


def write_grid(path, grid, dtype="float64", channels_first: bool = False) -> Path:
    path = Path(path)
    path.write_bytes(encode_grid(grid, dtype, channels_first))
    return path


def read_grid(path, channels_first: bool = False) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing grid file: {path}")
    return decode_grid(path.read_bytes(), channels_first, name=str(path))
