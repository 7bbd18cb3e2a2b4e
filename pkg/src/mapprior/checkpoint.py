"""Checkpoint container and codebook export.

A checkpoint is a ``torch.save`` archive of a plain dict::

    {"kind": "prior" | "sampler" | "perception",
     "preset": str, "arch": dict, "config_hash": str,
     "state_dict": {...}, "meta": {...}}

Codebooks can be exported on their own as ``u32 K, u32 D`` followed by a
little-endian float32 K x D matrix.
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np
import torch

from mapprior.exceptions import ConfigurationError, DataError, FormatError
from mapprior.presets import arch_dict, config_hash


def state_hash(state_dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name]
        h.update(name.encode())
        if torch.is_tensor(t):
            h.update(str(t.dtype).encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def snapshot(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def model_config_hash(preset_name: str, arch) -> str:
    return config_hash({"preset": preset_name, "arch": arch_dict(arch)})


def build_payload(kind: str, preset_name: str, arch, module: torch.nn.Module, meta: dict | None = None) -> dict:
    return {
        "kind": kind,
        "preset": preset_name,
        "arch": arch_dict(arch),
        "config_hash": model_config_hash(preset_name, arch),
        "state_dict": {k: v.detach().clone() for k, v in module.state_dict().items()},
        "meta": dict(meta or {}),
    }


def save_checkpoint(path, payload: dict) -> Path:
    path = Path(path)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "state_dict" not in payload:
        raise DataError(f"{path}: not a mapprior checkpoint")
    if kind is not None and payload.get("kind") != kind:
        raise ConfigurationError(f"{path}: expected a {kind!r} checkpoint, found {payload.get('kind')!r}")
    return payload


def write_codebook(path, weight) -> Path:
    w = np.asarray(weight.detach().cpu() if torch.is_tensor(weight) else weight, dtype="<f4")
    K, D = w.shape
    path = Path(path)
    path.write_bytes(struct.pack("<II", K, D) + w.tobytes(order="C"))
    return path


def read_codebook(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise FormatError("truncated codebook header", offset=len(buf))
    K, D = struct.unpack_from("<II", buf, 0)
    if len(buf) != 8 + 4 * K * D:
        raise FormatError(f"codebook payload size {len(buf) - 8} != 4*{K}*{D}", offset=8)
    return np.frombuffer(buf, dtype="<f4", offset=8).reshape(K, D).copy()
