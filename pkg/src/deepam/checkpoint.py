"""Model checkpoint container (magic ``DAMW``).

Byte layout, all little-endian (documented in the README as well):

    offset  size  field
    0       4     magic b"DAMW"
    4       4     u32 version (1)
    8       1     u8 task (0 denoise, 1 joint)
    9       1     u8 concat mode (0 halfway, 1 early)
    10      2     u16 image channels
    12      4     u32 K (cascade length)
    16      4     u32 trunk depth
    20      4     u32 trunk width
    24      4     u32 guidance channels
    28      4     u32 guide_concat (1-based trunk conv)
    32      4     u32 gamma_tap (0 = default)
    36      4     u32 sr factor metadata
    40      4     f32 intensity scale
    44      4     u32 number of layer-table entries
    48      ...   layer table: per entry u8 kind (0 conv, 1 norm),
                  u32 in/state channels, u32 out channels
    ...     ...   plane payload: per plane u32 rank, u32 dims[rank],
                  float32 data, in declaration order

Declaration order per iteration k = 0..K-1: trunk conv0 (weight, bias),
norm0 (scale, shift, running mean, running variance), conv1, norm1, ...,
final conv, weight-branch convs a and b, then guidance convs.  The layer
table describes one iteration (all iterations share the architecture).
"""

from __future__ import annotations

import struct

import numpy as np

from .model import CascadeModel, ModelConfig

MAGIC = b"DAMW"
VERSION = 1
_HEADER = struct.Struct("<4sIBBHIIIIIIIf")

_TASKS = ("denoise", "joint")
_CONCATS = ("halfway", "early")


class CheckpointError(ValueError):
    pass


def _iter_layers(net):
    """(kind, layer) pairs in declaration order for one iteration."""
    out = []
    for i, conv in enumerate(net.trunk_convs):
        out.append(("conv", conv))
        if i < len(net.trunk_norms):
            out.append(("norm", net.trunk_norms[i]))
    out.append(("conv", net.gamma_a))
    out.append(("conv", net.gamma_b))
    for conv in net.guide_convs:
        out.append(("conv", conv))
    return out


def _layer_planes(kind, layer):
    if kind == "conv":
        return [layer.weight.value, layer.bias.value]
    return [layer.scale.value, layer.shift.value, layer.running_mean, layer.running_var]


def save_checkpoint(model: CascadeModel, path) -> None:
    cfg = model.config
    blob = bytearray()
    blob += _HEADER.pack(
        MAGIC,
        VERSION,
        _TASKS.index(cfg.task),
        _CONCATS.index(cfg.concat),
        cfg.image_channels,
        cfg.k,
        cfg.depth,
        cfg.width,
        cfg.guide_channels,
        cfg.guide_concat,
        cfg.gamma_tap,
        cfg.sr_factor,
        cfg.scale,
    )
    layers = _iter_layers(model.nets[0])
    blob += struct.pack("<I", len(layers))
    for kind, layer in layers:
        if kind == "conv":
            blob += struct.pack("<BII", 0, layer.in_ch, layer.out_ch)
        else:
            blob += struct.pack("<BII", 1, layer.channels, layer.channels)
    for net in model.nets:
        for kind, layer in _iter_layers(net):
            for plane in _layer_planes(kind, layer):
                dims = plane.shape
                blob += struct.pack("<I", len(dims))
                blob += struct.pack(f"<{len(dims)}I", *dims)
                blob += np.ascontiguousarray(plane, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path) -> CascadeModel:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    (
        _magic,
        version,
        task_code,
        concat_code,
        image_channels,
        k,
        depth,
        width,
        guide_channels,
        guide_concat,
        gamma_tap,
        sr_factor,
        scale,
    ) = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg = ModelConfig(
        task=_TASKS[task_code],
        k=k,
        depth=depth,
        width=width,
        guide_channels=guide_channels,
        concat=_CONCATS[concat_code],
        guide_concat=guide_concat,
        gamma_tap=gamma_tap,
        image_channels=image_channels,
        sr_factor=sr_factor,
        scale=float(np.float32(scale)),
    )
    offset = _HEADER.size
    (n_layers,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    table = []
    for _ in range(n_layers):
        kind_code, cin, cout = struct.unpack_from("<BII", raw, offset)
        offset += 9
        table.append(("conv" if kind_code == 0 else "norm", cin, cout))

    model = CascadeModel(cfg, seed=0)
    expect = _iter_layers(model.nets[0])
    if len(expect) != n_layers:
        raise CheckpointError(f"{path}: layer table length {n_layers} != architecture")
    for (kind, layer), (tkind, cin, cout) in zip(expect, table):
        ok = kind == tkind
        if ok and kind == "conv":
            ok = (layer.in_ch, layer.out_ch) == (cin, cout)
        if ok and kind == "norm":
            ok = layer.channels == cin
        if not ok:
            raise CheckpointError(f"{path}: layer table does not match architecture")

    def read_plane():
        nonlocal offset
        if offset + 4 > len(raw):
            raise CheckpointError(f"{path}: truncated plane header")
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if dims else 1
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated plane payload")
        plane = np.frombuffer(raw[offset:end], dtype="<f4").reshape(dims)
        offset = end
        return plane.astype(np.float64)

    for net in model.nets:
        for kind, layer in _iter_layers(net):
            planes = [read_plane() for _ in _layer_planes(kind, layer)]
            if kind == "conv":
                layer.weight.value[...] = planes[0]
                layer.bias.value[...] = planes[1]
            else:
                layer.scale.value[...] = planes[0]
                layer.shift.value[...] = planes[1]
                layer.running_mean = planes[2]
                layer.running_var = planes[3]
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return model
