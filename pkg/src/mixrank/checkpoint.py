"""Named-tensor checkpoint container.

File layout is a sequence of length-prefixed records, one per tensor:

    u32 name_len | name (utf-8) | u8 dtype code | u8 ndim | u32 dims[ndim] | payload

All integers little-endian; payloads are raw row-major little-endian scalars.
Dtype codes: 1 = float32, 2 = float64, 3 = uint8 (used for the JSON metadata
record stored under the reserved name "__meta__").
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DecodeError
from .model import LayerParams, ModelConfig, Params

META_NAME = "__meta__"

_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3}


def dump_named(named: list[tuple[str, np.ndarray]]) -> bytes:
    chunks: list[bytes] = []
    for name, arr in named:
        code = _DTYPE_TO_CODE.get(np.dtype(arr.dtype))
        if code is None:
            raise ValueError(f"unsupported checkpoint dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes())
    return b"".join(chunks)


def load_named(blob: bytes) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    offset = 0

    def take(n: int, field: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise DecodeError(f"checkpoint truncated reading {field}", field=field)
        piece = blob[offset:offset + n]
        offset += n
        return piece

    while offset < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name_len"))
        name = take(name_len, "name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, "header"))
        if code not in _CODE_TO_DTYPE:
            raise DecodeError(f"unknown dtype code {code}", field="dtype")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        dtype = _CODE_TO_DTYPE[code]
        count = int(np.prod(dims)) if dims else 1
        payload = take(count * dtype.itemsize, "payload")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return out


def params_to_named(params: Params) -> list[tuple[str, np.ndarray]]:
    return [(name, t.data) for name, t in params.named_parameters()]


def content_hash(params: Params) -> str:
    """Stable 12-hex-digit identity of the parameter values (the model version)."""
    return hashlib.sha256(dump_named(params_to_named(params))).hexdigest()[:12]


def save_params(path: str | Path, params: Params, extra_meta: dict | None = None) -> str:
    """Write a checkpoint; returns the content hash recorded inside it."""
    version = content_hash(params)
    meta = {"config": params.config.to_dict(), "version": version}
    if extra_meta:
        meta.update(extra_meta)
    meta_arr = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    blob = dump_named([(META_NAME, meta_arr)] + params_to_named(params))
    Path(path).write_bytes(blob)
    return version


def load_params(path: str | Path) -> tuple[Params, dict]:
    tensors = load_named(Path(path).read_bytes())
    if META_NAME not in tensors:
        raise DecodeError("checkpoint missing metadata record", field=META_NAME)
    meta = json.loads(tensors.pop(META_NAME).tobytes().decode("utf-8"))
    config = ModelConfig(**meta["config"])

    def grab(name: str) -> Tensor:
        if name not in tensors:
            raise DecodeError(f"checkpoint missing tensor {name}", field=name)
        return Tensor(tensors[name], requires_grad=True)

    layers = [
        LayerParams(**{field: grab(f"layers.{i}.{field}")
                       for field in ("wq", "wk", "wv", "wo", "attn_norm", "ffn_norm",
                                     "w_gate", "w_up", "w_down")})
        for i in range(config.layers)
    ]
    params = Params(
        config=config,
        token_embedding=grab("token_embedding"),
        layers=layers,
        final_norm=grab("final_norm"),
        head_weight=grab("head_weight") if config.head_mode == "binary" else None,
    )
    return params, meta
