"""Flat little-endian checkpoint of named parameters, optimizer moments and buffers.

Layout::

    b"RICK" | u32 version | u32 entry count
    per entry: u32 name length | utf-8 name | u8 kind (0 parameter, 1 buffer)
               | u32 ndim | ndim x u32 shape | u64 adam step
               | values f64 | (parameters only) first moment f64 | second moment f64
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RICK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(module, path) -> None:
    entries = []
    for name, p in module.named_parameters():
        entries.append((name, 0, p.data, p.step, p.m, p.v))
    for name, buf in module.named_buffers():
        entries.append((name, 1, np.asarray(buf), 0, None, None))
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, kind, data, step, m, v in entries:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<BI", kind, data.ndim))
        out.append(struct.pack(f"<{data.ndim}IQ", *data.shape, step))
        out.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
        if kind == 0:
            out.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
            out.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def read_checkpoint(path) -> dict:
    """Return ``{name: dict(kind, values, step, m, v)}``."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        kind, ndim = struct.unpack_from("<BI", blob, pos)
        pos += 5
        *shape, step = struct.unpack_from(f"<{ndim}IQ", blob, pos)
        pos += 4 * ndim + 8
        size = int(np.prod(shape)) if shape else 1

        def take():
            nonlocal pos
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
            return arr

        values = take()
        m = v = None
        if kind == 0:
            m, v = take(), take()
        entries[name] = dict(kind=kind, values=values, step=step, m=m, v=v)
    if pos != len(blob):
        raise CheckpointError(f"trailing bytes at offset {pos}")
    return entries


def load_checkpoint(module, path) -> None:
    entries = read_checkpoint(path)
    for name, p in module.named_parameters():
        if name not in entries:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        e = entries[name]
        if e["values"].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {e['values'].shape} vs {p.data.shape}")
        p.data[...] = e["values"]
        p.m[...] = e["m"]
        p.v[...] = e["v"]
        p.step = e["step"]
    for name, buf in module.named_buffers():
        if name not in entries:
            raise CheckpointError(f"checkpoint lacks buffer {name}")
        buf[...] = entries[name]["values"]
