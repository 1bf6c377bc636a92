"""
Model checkpoints in the GABW binary format.

    b"GABW" | u32 version=1
    u32 descriptor length | descriptor (UTF-8 JSON, sorted keys)
    u32 tensor count
    per tensor (sorted by name): u32 name length | name (UTF-8)
                                 u32 rank | u32[rank] shape | f64[prod(shape)] data

The descriptor carries the architecture, normalization stats, channel names
and the digest of the training config. Everything is little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .dataset import _Reader
from .errors import ConsistencyError, FormatError, MagicMismatchError, VersionMismatchError
from .gcn import Architecture, GeometricAutoencoder, expected_shapes

GABW_MAGIC = b"GABW"
GABW_VERSION = 1


@dataclass
class Checkpoint:
    arch: Architecture
    params: Dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    channel_names: tuple = ("u",)
    config_digest: str = ""
    extra: dict = field(default_factory=dict)

    def descriptor(self) -> dict:
        return {
            "architecture": self.arch.to_dict(),
            "normalization": {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]},
            "channel_names": list(self.channel_names),
            "config_digest": self.config_digest,
            "extra": self.extra,
        }

    def autoencoder(self) -> GeometricAutoencoder:
        if self.arch.kind != "autoencoder":
            raise ConsistencyError(f"checkpoint holds a {self.arch.kind} model, not an autoencoder")
        return GeometricAutoencoder(self.arch, self.params, self.mean, self.std, self.channel_names)

    def validate(self) -> None:
        shapes = expected_shapes(self.arch)
        if set(shapes) != set(self.params):
            missing = sorted(set(shapes) - set(self.params))
            unexpected = sorted(set(self.params) - set(shapes))
            raise ConsistencyError(f"tensor names disagree with descriptor (missing={missing}, unexpected={unexpected})")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ConsistencyError(f"{name}: shape {self.params[name].shape} but descriptor implies {shape}")
        if self.mean.size != self.arch.d_u or self.std.size != self.arch.d_u:
            raise ConsistencyError("normalization stats do not match d_u")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    ckpt.validate()
    desc = json.dumps(ckpt.descriptor(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [GABW_MAGIC, struct.pack("<I", GABW_VERSION), struct.pack("<I", len(desc)), desc,
             struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name], dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != GABW_MAGIC:
        raise MagicMismatchError(f"expected magic {GABW_MAGIC!r}, found {magic!r}")
    version = r.u32()
    if version != GABW_VERSION:
        raise VersionMismatchError(f"unsupported GABW version {version}")
    try:
        desc = json.loads(r.take(r.u32()).decode("utf-8"))
        arch = Architecture.from_dict(desc["architecture"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"malformed checkpoint descriptor: {e}") from e

    params: Dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        params[name] = r.f64s(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after GABW tensors")

    norm = desc.get("normalization", {})
    ckpt = Checkpoint(
        arch=arch,
        params=params,
        mean=np.asarray(norm.get("mean", []), dtype=np.float64),
        std=np.asarray(norm.get("std", []), dtype=np.float64),
        channel_names=tuple(desc.get("channel_names", ())),
        config_digest=desc.get("config_digest", ""),
        extra=desc.get("extra", {}),
    )
    ckpt.validate()
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
