"""
Dataset container and the GABD binary format.

GABD layout (all integers and floats little-endian):

    b"GABD" | u32 version=1 | u64 sample count
    per sample: u32 N | u32 E | u32 d | u32 d_u
                f64[N*d] coords | u32[E*2] edges | f64[N*d_u] field
    footer:     u32 channel count C | f64[C] mean | f64[C] std

Boundary flags and channel names are not stored; channel names are restored
from the channel count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import FormatError, MagicMismatchError, TruncatedFileError, VersionMismatchError
from .geometry import Field, Mesh

GABD_MAGIC = b"GABD"
GABD_VERSION = 1

Sample = Tuple[Mesh, Field]


def default_channel_names(d_u: int) -> tuple:
    if d_u == 1:
        return ("u",)
    if d_u == 2:
        return ("u", "f")
    return tuple(f"c{k}" for k in range(d_u))


@dataclass
class Dataset:
    samples: List[Sample]
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_channels(self) -> int:
        if self.samples:
            return self.samples[0][1].n_channels
        return int(self.mean.size)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Dataset":
        mean, std = normalization_stats(samples)
        return cls(list(samples), mean, std)

    def split(self, n_train: int) -> Tuple["Dataset", "Dataset"]:
        """Leading n_train samples for training; stats come from that split only and are shared."""
        train = Dataset.from_samples(self.samples[:n_train])
        test = Dataset(self.samples[n_train:], train.mean.copy(), train.std.copy())
        return train, test

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def equals(self, other: "Dataset") -> bool:
        if len(self) != len(other):
            return False
        if not (np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)):
            return False
        for (m1, f1), (m2, f2) in zip(self.samples, other.samples):
            if not (np.array_equal(m1.coords, m2.coords) and np.array_equal(m1.edges, m2.edges)
                    and np.array_equal(f1.values, f2.values)):
                return False
        return True


def normalization_stats(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std pooled over every node of every sample; zero std is replaced by 1."""
    if not samples:
        return np.zeros(0), np.zeros(0)
    stacked = np.concatenate([f.values for _, f in samples], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    return mean, std


# ---------------------------------------------------------------------------
# binary codec
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(self.pos, n)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def u32s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<u4").astype(np.int64)


def encode_dataset(dataset: Dataset) -> bytes:
    parts = [GABD_MAGIC, struct.pack("<IQ", GABD_VERSION, len(dataset))]
    for mesh, fld in dataset.samples:
        n, d = mesh.coords.shape
        parts.append(struct.pack("<IIII", n, mesh.n_edges, d, fld.n_channels))
        parts.append(mesh.coords.astype("<f8").tobytes())
        parts.append(mesh.edges.astype("<u4").tobytes())
        parts.append(fld.values.astype("<f8").tobytes())
    c = int(dataset.mean.size)
    parts.append(struct.pack("<I", c))
    parts.append(np.asarray(dataset.mean, dtype="<f8").tobytes())
    parts.append(np.asarray(dataset.std, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes) -> Dataset:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != GABD_MAGIC:
        raise MagicMismatchError(f"expected magic {GABD_MAGIC!r}, found {magic!r}")
    version = r.u32()
    if version != GABD_VERSION:
        raise VersionMismatchError(f"unsupported GABD version {version}")
    count = r.u64()
    samples: List[Sample] = []
    for _ in range(count):
        n, e, d, d_u = r.u32(), r.u32(), r.u32(), r.u32()
        coords = r.f64s(n * d).reshape(n, d)
        edges = r.u32s(e * 2).reshape(e, 2)
        values = r.f64s(n * d_u).reshape(n, d_u)
        samples.append((Mesh(coords, edges), Field(values, default_channel_names(d_u))))
    c = r.u32()
    mean = r.f64s(c)
    std = r.f64s(c)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after GABD footer")
    return Dataset(samples, mean, std)


def write_dataset(dataset: Dataset, path) -> None:
    Path(path).write_bytes(encode_dataset(dataset))


def read_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())
