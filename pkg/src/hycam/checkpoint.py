"""``HYCAM1`` checkpoint container.

Layout (all integers little-endian ``uint32`` unless noted)::

    b"HYCAM1"
    uint8   precision bits (32 or 64)
    uint32  config length, then that many bytes of UTF-8 JSON (sorted keys)
    uint32  entry count
    entries: uint32 name length, name bytes, uint32 rank, rank x uint32 dims,
             prod(dims) IEEE-754 values (little-endian, precision bits wide)

The JSON record carries ``kind`` (``backbone`` or ``adapters``) and
``backbone_hash``, the digest of the backbone config, so adapters are only
ever loaded onto the backbone they were trained against.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .adapters import AdapterConfig, HyCamAdapters
from .autodiff import Parameter
from .backbone import Backbone, BackboneConfig

MAGIC = b"HYCAM1"


class CheckpointError(ValueError):
    pass


def config_hash(config: BackboneConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_checkpoint(path: str | Path, meta: dict, params: Iterable[Parameter], precision: str) -> None:
    bits = 64 if precision == "fp64" else 32
    dtype = np.dtype("<f8" if bits == 64 else "<f4")
    out = bytearray(MAGIC)
    out += struct.pack("<B", bits)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out += struct.pack("<I", len(blob)) + blob
    params = list(params)
    out += struct.pack("<I", len(params))
    for p in params:
        name = p.name.encode()
        arr = np.ascontiguousarray(p.data, dtype=dtype)
        out += struct.pack("<I", len(name)) + name
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))


def read_checkpoint(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Returns ``(precision, meta, {name: array})`` in file order."""
    buf = Path(path).read_bytes()
    if buf[:6] != MAGIC:
        raise CheckpointError(f"{path}: not a HYCAM1 checkpoint")
    pos = 6
    (bits,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if bits not in (32, 64):
        raise CheckpointError(f"{path}: bad precision flag {bits}")
    dtype = np.dtype("<f8" if bits == 64 else "<f4")
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos:pos + n].decode())
    pos += n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode()
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype=dtype, count=size, offset=pos).reshape(dims)
        pos += size * dtype.itemsize
        arrays[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return ("fp64" if bits == 64 else "fp32"), meta, arrays


def save_backbone(path: str | Path, model: Backbone, extra: dict | None = None) -> None:
    meta = {"kind": "backbone", "backbone": model.config.to_dict(), "backbone_hash": config_hash(model.config)}
    meta.update(extra or {})
    write_checkpoint(path, meta, model.parameters(), model.precision)


def load_backbone(path: str | Path, precision: str | None = None) -> tuple[Backbone, dict]:
    stored, meta, arrays = read_checkpoint(path)
    if meta.get("kind") != "backbone":
        raise CheckpointError(f"{path}: expected a backbone checkpoint, got {meta.get('kind')!r}")
    config = BackboneConfig(**meta["backbone"])
    model = Backbone(config, precision=precision or stored)
    _assign(model.params, arrays, path)
    return model, meta


def save_adapters(path: str | Path, adapters: HyCamAdapters, backbone_config: BackboneConfig,
                  extra: dict | None = None) -> None:
    meta = {"kind": "adapters", "adapter": adapters.config.to_dict(), "backbone_hash": config_hash(backbone_config),
            "n_layers": len(adapters.layers), "d_model": backbone_config.d_model}
    meta.update(extra or {})
    write_checkpoint(path, meta, adapters.parameters(), adapters.precision)


def load_adapters(path: str | Path, backbone_config: BackboneConfig, precision: str | None = None
                  ) -> tuple[HyCamAdapters, dict]:
    stored, meta, arrays = read_checkpoint(path)
    if meta.get("kind") != "adapters":
        raise CheckpointError(f"{path}: expected an adapter checkpoint, got {meta.get('kind')!r}")
    if meta.get("backbone_hash") != config_hash(backbone_config):
        raise CheckpointError(
            f"{path}: backbone hash {meta.get('backbone_hash')} does not match {config_hash(backbone_config)}")
    adapters = HyCamAdapters(meta["n_layers"], meta["d_model"], AdapterConfig(**meta["adapter"]),
                             precision=precision or stored)
    _assign(adapters.params, arrays, path)
    return adapters, meta


def _assign(params: dict[str, Parameter], arrays: dict[str, np.ndarray], path) -> None:
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"{path}: parameter mismatch, missing={missing[:5]} unexpected={extra[:5]}")
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.tensor.data = arrays[name].astype(p.data.dtype)
