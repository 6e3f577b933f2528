"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"CSCP"
    version u32
    m_len   u64      metadata byte length
    meta    m_len    UTF-8 JSON: model config, step count, seeds, RNG states
    count   u64      tensor record count
    record* :
        n_len  u64   name byte length
        name   UTF-8
        ndim   u32
        dims   ndim x u64
        data   float64 little-endian, row-major

Current weights are stored under their plain names; the frozen
initialization snapshot is stored under the ``init/`` namespace. Records
are sorted by name, so identical states serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, Parameters, config_from_dict, config_to_dict
from .tensor import Tensor

MAGIC = b"CSCP"
VERSION = 1
INIT_NAMESPACE = "init/"


class CheckpointError(ValueError):
    pass


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    name_b = name.encode("utf-8")
    header = struct.pack("<Q", len(name_b)) + name_b
    header += struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return header + payload


def save_checkpoint(path, params: Parameters) -> None:
    meta = {
        "config": config_to_dict(params.config),
        "step": params.step,
        "meta": params.meta,
    }
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = {name: t.data for name, t in params.values.items()}
    tensors.update({INIT_NAMESPACE + name: arr for name, arr in params.init_values.items()})

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", len(meta_b))
    blob += meta_b
    blob += struct.pack("<Q", len(tensors))
    for name in sorted(tensors):
        blob += _pack_tensor(name, tensors[name])
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path) -> Parameters:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u64()).decode("utf-8"))
    count = r.u64()

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u64()).decode("utf-8")
        ndim = r.u32()
        dims = struct.unpack(f"<{ndim}Q", r.take(8 * ndim)) if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        tensors[name] = arr
    if r.off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.off} trailing bytes")

    config = config_from_dict(meta["config"])
    values = {}
    init_values = {}
    for name, arr in tensors.items():
        if name.startswith(INIT_NAMESPACE):
            init_values[name[len(INIT_NAMESPACE):]] = arr
        else:
            values[name] = Tensor(arr, requires_grad=True, op="param")
    if set(values) != set(init_values):
        raise CheckpointError(f"{path}: current and init tensor sets differ")
    return Parameters(
        config=config,
        values=values,
        init_values=init_values,
        step=meta["step"],
        meta=meta["meta"],
    )
