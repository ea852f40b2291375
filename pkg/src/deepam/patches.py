"""Training patch sets: aligned random crops plus a versioned binary container.

Container layout (all integers little-endian):

    magic   4 bytes  b"DAMP"
    version u32      currently 1
    count   u32      number of patch groups
    size    u32      square patch side in pixels
    arity   u32      planes per group (2 = input/target, 3 = input/guidance/target)
    data    count * arity * size * size float32, row-major, group-major

Planes within a group are aligned crops taken at identical coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DAMP"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class PatchFormatError(ValueError):
    pass


@dataclass
class PatchSet:
    data: np.ndarray  # (count, arity, size, size) float64

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 4 or a.shape[2] != a.shape[3]:
            raise ValueError(f"patch data must be (count, arity, size, size), got {a.shape}")
        self.data = a

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def arity(self) -> int:
        return self.data.shape[1]

    @property
    def size(self) -> int:
        return self.data.shape[2]

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, self.count, self.size, self.arity))
            f.write(np.ascontiguousarray(self.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "PatchSet":
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < _HEADER.size or raw[:4] != MAGIC:
            raise PatchFormatError(f"{path}: not a patch container (bad magic)")
        magic, version, count, size, arity = _HEADER.unpack_from(raw)
        if version != VERSION:
            raise PatchFormatError(f"{path}: unsupported version {version}")
        need = count * arity * size * size * 4
        payload = raw[_HEADER.size : _HEADER.size + need]
        if len(payload) != need:
            raise PatchFormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
        data = np.frombuffer(payload, dtype="<f4").reshape(count, arity, size, size)
        return cls(data=data.astype(np.float64))


def sample_patches(groups, size: int, count: int, seed: int) -> PatchSet:
    """Deterministic uniform-random aligned crops.

    `groups` is a sequence of image tuples (all planes of one tuple share a
    shape); each patch picks a group and a crop position uniformly, and the
    crop is applied at identical coordinates to every plane of the group.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    groups = [tuple(np.asarray(p, dtype=np.float64) for p in g) for g in groups]
    if not groups:
        raise ValueError("no image groups given")
    arity = len(groups[0])
    for g in groups:
        if len(g) != arity:
            raise ValueError("all groups must have the same arity")
        for p in g:
            if p.ndim != 2:
                raise ValueError("patch sampling expects single-channel planes")
            if p.shape != g[0].shape:
                raise ValueError("planes within a group must share a shape")
        h, w = g[0].shape
        if h < size or w < size:
            raise ValueError(f"patch size {size} exceeds image {h}x{w}")
    rng = np.random.default_rng(seed)
    out = np.empty((count, arity, size, size), dtype=np.float64)
    for n in range(count):
        gi = int(rng.integers(0, len(groups)))
        h, w = groups[gi][0].shape
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        for a in range(arity):
            out[n, a] = groups[gi][a][y : y + size, x : x + size]
    return PatchSet(data=out)
