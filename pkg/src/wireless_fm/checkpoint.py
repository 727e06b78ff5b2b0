"""Binary checkpoint container.

Layout (all integers little-endian):

    magic        4 bytes  b"WFMC"
    version      uint32
    header_len   uint64   byte length of the JSON header that follows
    header       UTF-8 JSON: {"model": ModelConfig, "meta": {...}}
    n_arrays     uint32
    per array:
        name_len uint32, name (UTF-8)
        ndim     uint32, dims (uint64 x ndim)
        data     float32 little-endian, C order

Optimizer moments, when present, are stored as arrays named ``adam.m.<param>`` and
``adam.v.<param>``; the optimizer step count lives in ``meta["optimizer_step"]``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, check_params, param_shapes
from .training import OptimizerState

CHECKPOINT_MAGIC = b"WFMC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_array(buf: bytearray, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    buf += struct.pack("<I", len(raw)) + raw
    buf += struct.pack("<I", arr.ndim)
    buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, meta: dict | None = None,
                    opt_state: OptimizerState | None = None) -> None:
    check_params(params, cfg)
    meta = dict(meta or {})
    arrays = [(k, params[k]) for k in param_shapes(cfg)]
    if opt_state is not None:
        meta["optimizer_step"] = opt_state.step
        arrays += [(f"adam.m.{k}", opt_state.m[k]) for k in param_shapes(cfg)]
        arrays += [(f"adam.v.{k}", opt_state.v[k]) for k in param_shapes(cfg)]
    header = json.dumps({"model": cfg.to_dict(), "meta": meta}, sort_keys=True).encode()
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        _write_array(buf, name, arr)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict, OptimizerState | None]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint at offset {pos} (need {n} bytes)")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic at offset 0")
    version, hlen = struct.unpack("<IQ", take(12))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(take(hlen).decode())
    cfg = ModelConfig.from_dict(header["model"])
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    names = list(param_shapes(cfg))
    params = {k: arrays[k] for k in names if k in arrays}
    check_params(params, cfg)
    meta = header.get("meta", {})
    opt = None
    if "optimizer_step" in meta:
        opt = OptimizerState({k: arrays[f"adam.m.{k}"] for k in names},
                             {k: arrays[f"adam.v.{k}"] for k in names}, int(meta["optimizer_step"]))
    return params, cfg, meta, opt
