"""Versioned, byte-deterministic checkpoint container.

Layout::

    b"SFCKPT\\0\\0"                 8-byte magic
    uint32 LE                      format version
    uint64 LE                      length of the JSON header
    JSON header (UTF-8)            architecture descriptor + tensor table
    raw tensor payloads            little-endian, C-order, in table order

Every tensor entry records ``name``, ``dtype`` (numpy string), ``shape``,
``offset`` (relative to the payload start) and ``nbytes``. Loading rebuilds
the described modules and checks parameter counts against the closed forms.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import encoders

MAGIC = b"SFCKPT\0\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _component_descriptor(module: nn.Module) -> dict:
    if isinstance(module, encoders.Encoder):
        return {"kind": "encoder", "variant": module.variant, "parameters": encoders.count_parameters(module)}
    if isinstance(module, encoders.DeconvHeader):
        return {"kind": "header", "nc": module.out_channels, "parameters": encoders.count_parameters(module)}
    from .pretrain import VaeHead

    if isinstance(module, VaeHead):
        return {"kind": "vae_head", "latent_channels": module.latent_channels,
                "parameters": encoders.count_parameters(module)}
    raise CheckpointError(f"cannot describe module of type {type(module).__name__}")


def _build_component(desc: dict) -> nn.Module:
    kind = desc["kind"]
    if kind == "encoder":
        m = encoders.Encoder(desc["variant"])
        expected = sum(encoders.encoder_param_table(desc["variant"]).values())
    elif kind == "header":
        m = encoders.DeconvHeader(int(desc["nc"]))
        expected = sum(encoders.header_param_table(int(desc["nc"])).values())
    elif kind == "vae_head":
        from .pretrain import VaeHead, vae_head_params

        m = VaeHead(int(desc["latent_channels"]))
        expected = vae_head_params(int(desc["latent_channels"]))
    else:
        raise CheckpointError(f"unknown component kind {kind!r}")
    if encoders.count_parameters(m) != expected or desc.get("parameters", expected) != expected:
        raise CheckpointError(f"{kind}: parameter count mismatch ({desc.get('parameters')} vs {expected})")
    return m


def save_checkpoint(path, components: dict[str, nn.Module], extra: dict | None = None) -> Path:
    table, blobs, offset = [], [], 0
    for cname, module in components.items():
        for key, t in module.state_dict().items():
            arr = t.detach().cpu().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            buf = np.ascontiguousarray(arr).tobytes()
            table.append({"name": f"{cname}.{key}", "dtype": arr.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(buf)})
            blobs.append(buf)
            offset += len(buf)
    header = {
        "format": "sarfusion-checkpoint",
        "version": VERSION,
        "components": {name: _component_descriptor(m) for name, m in components.items()},
        "extra": extra or {},
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes)
        for b in blobs:
            fh.write(b)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, {tensor name: array}) without building modules."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(data[20 : 20 + hlen])
    base = 20 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        chunk = data[start : start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path) -> tuple[dict[str, nn.Module], dict]:
    """Rebuild and populate every component; returns (components, extra)."""
    header, arrays = read_checkpoint(path)
    out = {}
    for cname, desc in header["components"].items():
        module = _build_component(desc)
        prefix = cname + "."
        state = {k[len(prefix):]: torch.from_numpy(v.astype(v.dtype.newbyteorder("=")))
                 for k, v in arrays.items() if k.startswith(prefix)}
        module.load_state_dict(state, strict=True)
        out[cname] = module
    return out, header.get("extra", {})


def file_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
