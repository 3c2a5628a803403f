"""Binary tensor format and checkpoint container.

S2TENSOR record (all integers little-endian)::

    b"S2TENSOR" | version u16 | rank u8 | shape u64 * rank | role u8 * rank | f64 payload

Checkpoint file::

    b"S2CKPT01" | manifest length u64 | manifest JSON (utf-8) | S2TENSOR records

The manifest lists entries (name, kind, shape) in record order plus a config echo.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .tensor import ROLES, Tensor, default_layout

TENSOR_MAGIC = b"S2TENSOR"
TENSOR_VERSION = 1
CKPT_MAGIC = b"S2CKPT01"
_GENERIC_BASE = 16


def _role_code(tag: str) -> int:
    if tag in ROLES:
        return ROLES.index(tag)
    return _GENERIC_BASE + int(tag[4:])


def _role_tag(code: int) -> str:
    if code < len(ROLES):
        return ROLES[code]
    if code >= _GENERIC_BASE:
        return f"axis{code - _GENERIC_BASE}"
    raise ValueError(f"unknown axis role code {code}")


def write_tensor(f: BinaryIO, t: Tensor | np.ndarray, layout=None) -> None:
    if isinstance(t, Tensor):
        data, layout = t.data, t.layout
    else:
        data = np.ascontiguousarray(t, dtype=np.float64)
        layout = layout or default_layout(data.ndim)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<HB", TENSOR_VERSION, data.ndim))
    f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    f.write(bytes(_role_code(r) for r in layout))
    f.write(data.astype("<f8").tobytes())


def read_tensor(f: BinaryIO) -> Tensor:
    magic = f.read(8)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<HB", f.read(3))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    layout = tuple(_role_tag(c) for c in f.read(rank))
    n = int(np.prod(shape)) if rank else 1
    payload = f.read(8 * n)
    if len(payload) != 8 * n:
        raise ValueError("truncated tensor payload")
    return Tensor(np.frombuffer(payload, dtype="<f8").reshape(shape), layout)


def tensor_to_bytes(t: Tensor) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(b: bytes) -> Tensor:
    return read_tensor(io.BytesIO(b))


def save_checkpoint(path: str | Path, model, config: dict | None = None) -> None:
    params = list(model.named_parameters())
    buffers = list(model.named_buffers())
    entries = [{"name": n, "kind": "param", "shape": list(p.shape)} for n, p in params]
    entries += [{"name": n, "kind": "buffer", "shape": list(b.shape)} for n, b in buffers]
    manifest = json.dumps({"format": 1, "entries": entries, "config": config or {}},
                          sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for _, p in params:
            write_tensor(f, p)
        for _, b in buffers:
            write_tensor(f, b, ("channel",) if b.ndim == 1 else None)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(state, manifest)``; ``state`` maps entry names to arrays."""
    with open(path, "rb") as f:
        if f.read(8) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(n))
        state = {e["name"]: read_tensor(f).data.copy() for e in manifest["entries"]}
    return state, manifest
