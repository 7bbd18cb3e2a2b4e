"""Binary multi-layer (.bml) grid files.

Layout::

    b"BML1"
    u32 version (=1), u32 C, u32 H, u32 W, u32 dtype (0 = binary u8, 1 = float32)
    C x (u32 byte length, UTF-8 channel name)
    f64 resolution (meters per pixel)
    payload, channel-major then row-major

All integers and floats are little-endian. A ``<stem>.json`` sidecar next
to the file carries provenance (seed, generator spec hash, ...).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from mapprior.exceptions import FormatError
from mapprior.layout import LayoutGrid, PseudoSensor, SoftLayout

MAGIC = b"BML1"
VERSION = 1
DTYPE_BINARY = 0
DTYPE_FLOAT32 = 1

_HEADER = struct.Struct("<5I")


def header_size(channels) -> int:
    return len(MAGIC) + _HEADER.size + sum(4 + len(c.encode("utf-8")) for c in channels) + 8


def encode_bml(grid) -> bytes:
    if isinstance(grid, LayoutGrid):
        dtype, payload = DTYPE_BINARY, grid.data.astype("<u1").tobytes(order="C")
    else:
        dtype, payload = DTYPE_FLOAT32, grid.data.astype("<f4").tobytes(order="C")
    C, H, W = grid.shape
    parts = [MAGIC, _HEADER.pack(VERSION, C, H, W, dtype)]
    for name in grid.channels:
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw]
    parts += [struct.pack("<d", grid.resolution), payload]
    return b"".join(parts)


def decode_bml(buf: bytes, as_sensor: bool = False):
    """Parse .bml bytes. Float payloads become :class:`SoftLayout` unless ``as_sensor``."""
    if len(buf) < len(MAGIC) or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", offset=0)
    pos = len(MAGIC)
    if len(buf) < pos + _HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    version, C, H, W, dtype = _HEADER.unpack_from(buf, pos)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=pos)
    if C == 0 or H == 0 or W == 0:
        raise FormatError(f"zero dimension in header ({C}, {H}, {W})", offset=pos + 4)
    if dtype not in (DTYPE_BINARY, DTYPE_FLOAT32):
        raise FormatError(f"unknown dtype code {dtype}", offset=pos + 16)
    pos += _HEADER.size
    names = []
    for _ in range(C):
        if len(buf) < pos + 4:
            raise FormatError("truncated channel name table", offset=len(buf))
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + n:
            raise FormatError("truncated channel name", offset=len(buf))
        try:
            names.append(bytes(buf[pos : pos + n]).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"channel name is not UTF-8: {exc}", offset=pos) from None
        pos += n
    if len(buf) < pos + 8:
        raise FormatError("truncated resolution field", offset=len(buf))
    (resolution,) = struct.unpack_from("<d", buf, pos)
    pos += 8
    itemsize = 1 if dtype == DTYPE_BINARY else 4
    expected = C * H * W * itemsize
    remaining = len(buf) - pos
    if remaining < expected:
        raise FormatError(f"truncated payload: need {expected} bytes, have {remaining}", offset=len(buf))
    if remaining > expected:
        raise FormatError(
            f"dimension mismatch: {remaining - expected} trailing bytes after {C}x{H}x{W} payload",
            offset=pos + expected,
        )
    np_dtype = "<u1" if dtype == DTYPE_BINARY else "<f4"
    data = np.frombuffer(buf, dtype=np_dtype, count=C * H * W, offset=pos).reshape(C, H, W)
    try:
        if dtype == DTYPE_BINARY:
            return LayoutGrid(tuple(names), data, resolution)
        if as_sensor:
            return PseudoSensor(tuple(names), data, resolution)
        return SoftLayout(tuple(names), data, resolution)
    except ValueError as exc:
        raise FormatError(f"invalid payload: {exc}", offset=pos) from None


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".json")


def write_bml(grid, path, provenance: dict | None = None) -> Path:
    """Write ``grid`` to ``path``; a sidecar is written when ``provenance`` is given."""
    path = Path(path)
    path.write_bytes(encode_bml(grid))
    if provenance is not None:
        sidecar_path(path).write_text(json.dumps(provenance, sort_keys=True, indent=1))
    return path


def read_bml(path, as_sensor: bool = False):
    return decode_bml(Path(path).read_bytes(), as_sensor=as_sensor)


def read_provenance(path) -> dict:
    side = sidecar_path(path)
    return json.loads(side.read_text()) if side.exists() else {}
