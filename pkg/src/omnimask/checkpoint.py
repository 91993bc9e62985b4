"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"OMDF"  u32 version
    u32 header_len, header_len bytes of canonical JSON (UTF-8):
        {"vocab": ..., "model": ..., "meta": ...}
    u32 tensor_count
    per tensor: u32 name_len, name (UTF-8), u32 rank, rank x u64 dims,
                prod(dims) x float32 values, row-major
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig, ModelParams, param_shapes
from .vocab import VocabLayout

MAGIC = b"OMDF"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class LayoutMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    @property
    def layout(self) -> VocabLayout:
        return self.params.config.vocab


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode(ckpt: Checkpoint) -> bytes:
    header = canonical_json({
        "vocab": ckpt.layout.to_dict(),
        "model": ckpt.config.to_dict(),
        "meta": ckpt.meta,
    }).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, tensor in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().to(torch.float32).contiguous().numpy()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"need {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic: not an OMDF checkpoint")
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
        layout = VocabLayout.from_dict(header["vocab"])
        config = ModelConfig.from_dict(header["model"], layout)
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise LayoutMismatchError(f"invalid header: {exc}") from exc
    expected = param_shapes(config)
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        if name in tensors:
            raise LayoutMismatchError(f"duplicate tensor {name!r}")
        if expected.get(name) != tuple(dims):
            raise LayoutMismatchError(
                f"tensor {name!r} with shape {dims} does not fit the declared model"
            )
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")
    if set(tensors) != set(expected):
        raise LayoutMismatchError(f"missing tensors: {sorted(set(expected) - set(tensors))}")
    return Checkpoint(ModelParams(config, tensors), header.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode(Path(path).read_bytes())
