"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic       4 bytes   b"RRDC"
    version     u32       FORMAT_VERSION
    topo_len    u32       length of the topology JSON that follows
    topology    bytes     UTF-8 JSON of the NetworkSpec
    meta_len    u32
    metadata    bytes     UTF-8 JSON (BN config, drop-connect config, provenance)
    count       u32       number of tensor records
    records     count x { name_len u16, name bytes, kind u8 (0 param, 1 buffer),
                          ndim u32, dims ndim x u32, data prod(dims) x float64 }

Tensors are written sorted by name so identical state gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import BNConfig, Model
from .network import NetworkSpec
from .tensor import Tensor

MAGIC = b"RRDC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: Model, metadata: dict | None = None) -> bytes:
    meta = dict(metadata or getattr(model, "metadata", {}) or {})
    meta["bn"] = {"eps": model.bn.eps, "momentum": model.bn.momentum}
    topo = model.spec.to_json().encode()
    meta_b = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts += [struct.pack("<I", len(topo)), topo, struct.pack("<I", len(meta_b)), meta_b]
    records = [(k, 0, t.data) for k, t in model.params.items()] + [(k, 1, v) for k, v in model.buffers.items()]
    records.sort(key=lambda r: r[0])
    parts.append(struct.pack("<I", len(records)))
    for name, kind, arr in records:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BI", kind, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> Model:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, blob, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = take("<I")
    spec = NetworkSpec.from_json(blob[pos : pos + n].decode())
    pos += n
    (n,) = take("<I")
    meta = json.loads(blob[pos : pos + n].decode())
    pos += n
    bn = meta.get("bn", {})
    model = Model(spec, seed=0, bn=BNConfig(**bn))
    model.metadata = meta
    (count,) = take("<I")
    for _ in range(count):
        (nlen,) = take("<H")
        name = blob[pos : pos + nlen].decode()
        pos += nlen
        kind, ndim = take("<BI")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        target = model.params if kind == 0 else model.buffers
        if name not in target:
            raise CheckpointError(f"tensor {name!r} does not belong to network {spec.name!r}")
        expected = target[name].shape
        if tuple(shape) != tuple(expected):
            raise CheckpointError(f"tensor {name!r} has shape {tuple(shape)}, network expects {tuple(expected)}")
        if kind == 0:
            target[name] = Tensor(arr)
        else:
            target[name] = arr
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint records")
    return model


def save(model: Model, path, metadata: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, metadata))


def load(path) -> Model:
    return loads(Path(path).read_bytes())
