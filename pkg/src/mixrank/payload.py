"""Binary tensor payload codec for the wire and the nearline cache.

Layout (little-endian throughout):

    magic "MXF1" | dtype u8 (1=float32, 2=float64) | ndim u8 |
    dims u32[ndim] | data (row-major scalars)

decode(encode(x)) is bitwise-exact for well-formed tensors.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DecodeError

MAGIC = b"MXF1"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_MAX_ELEMENTS = 1 << 32  # refuse absurd shapes before allocating


def encode_payload(rows: np.ndarray) -> bytes:
    rows = np.asarray(rows)
    code = _CODES.get(np.dtype(rows.dtype))
    if code is None:
        raise ValueError(f"payload dtype must be float32/float64, got {rows.dtype}")
    if not np.all(np.isfinite(rows)):
        raise ValueError("payload values must be finite")
    header = MAGIC + struct.pack("<BB", code, rows.ndim)
    header += struct.pack(f"<{rows.ndim}I", *rows.shape)
    return header + np.ascontiguousarray(rows, dtype=_DTYPES[code]).tobytes()


def decode_payload(blob: bytes) -> np.ndarray:
    if len(blob) < 6:
        raise DecodeError("payload shorter than fixed header", field="magic")
    if blob[:4] != MAGIC:
        raise DecodeError(f"bad magic {blob[:4]!r}", field="magic")
    code, ndim = struct.unpack("<BB", blob[4:6])
    if code not in _DTYPES:
        raise DecodeError(f"unknown dtype code {code}", field="dtype")
    dims_end = 6 + 4 * ndim
    if len(blob) < dims_end:
        raise DecodeError("payload truncated in dims", field="dims")
    dims = struct.unpack(f"<{ndim}I", blob[6:dims_end])
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_ELEMENTS:
        raise DecodeError(f"dims {dims} overflow element budget", field="dims")
    dtype = _DTYPES[code]
    expected = count * dtype.itemsize
    body = blob[dims_end:]
    if len(body) != expected:
        raise DecodeError(
            f"payload body is {len(body)} bytes, dims require {expected}", field="data")
    return np.frombuffer(body, dtype=dtype).reshape(dims).copy()
