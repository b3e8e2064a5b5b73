"""Binary checkpoint format.

Layout (little-endian)::

    b"SMIR"                      magic
    u32   version                currently 2
    u32   meta_len, bytes        UTF-8 "key=value" lines
    u32   tensor_count
    per tensor:
        u16 name_len, bytes      UTF-8 name
        u8  rank
        u32 * rank               extents
        f32 * prod(extents)      values
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .unet import UNet, UNetConfig, layer_shapes

MAGIC = b"SMIR"
VERSION = 2


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: UNetConfig
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)
    version: int = VERSION

    @property
    def head(self) -> str:
        return self.config.head

    def model(self) -> UNet:
        return UNet(self.config, {k: Tensor(v.copy(), requires_grad=True) for k, v in self.tensors.items()})

    @classmethod
    def from_model(cls, model: UNet, **meta) -> "Checkpoint":
        tensors = {k: p.data.astype("<f4") for k, p in model.params.items()}
        return cls(model.config, tensors, {k: str(v) for k, v in meta.items()})

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", self.version))
        meta = {"config": json.dumps(self.config.to_dict(), sort_keys=True), "head": self.head}
        meta.update(self.meta)
        text = "".join(f"{k}={_escape(v)}\n" for k, v in meta.items()).encode()
        buf.write(struct.pack("<I", len(text)))
        buf.write(text)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            raw = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _escape(v) -> str:
    return str(v).replace("\\", "\\\\").replace("\n", "\\n")


def _unescape(v: str) -> str:
    out, i = [], 0
    while i < len(v):
        if v[i] == "\\" and i + 1 < len(v):
            out.append("\n" if v[i + 1] == "n" else v[i + 1])
            i += 2
        else:
            out.append(v[i])
            i += 1
    return "".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is not supported (reader is v{VERSION})")
    (meta_len,) = r.unpack("<I")
    meta = {}
    for line in r.take(meta_len).decode().splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed metadata line {line!r}")
        meta[key] = _unescape(value)
    if "config" not in meta:
        raise CheckpointError("checkpoint metadata has no config")
    config = UNetConfig(**json.loads(meta.pop("config")))
    head = meta.pop("head", config.head)
    if head != config.head:
        raise CheckpointError(f"head kind {head!r} disagrees with config head {config.head!r}")
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name}")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after tensor table")
    ckpt = Checkpoint(config, tensors, meta, version)
    _validate(ckpt)
    return ckpt


def _validate(ckpt: Checkpoint) -> None:
    expected = layer_shapes(ckpt.config)
    for name, shape in expected.items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        if ckpt.tensors[name].shape != shape:
            raise CheckpointError(f"tensor {name} has shape {ckpt.tensors[name].shape}, config implies {shape}")
    extra = set(ckpt.tensors) - set(expected)
    if extra:
        raise CheckpointError(f"unexpected tensor(s): {', '.join(sorted(extra))}")


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write ``ckpt`` atomically; returns its sha256."""
    data = ckpt.to_bytes()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
