"""Single-file model checkpoints.

Layout (all integers little-endian)::

    b"SCBCT"  u32 format_version  u32 header_len  header (UTF-8 JSON)
    u32 n_blobs
    per blob, names in alphabetical order:
        u16 name_len  name  u8 dtype ('f' f32, 'd' f64, 'q' i64)
        u8 ndim  ndim * u32 dims  u64 nbytes  payload
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SCBCT"
FORMAT_VERSION = 1
_CODES = {"f": "<f4", "d": "<f8", "q": "<i8"}


class CheckpointError(ValueError):
    pass


def _code_for(t: torch.Tensor, keep_float64: bool) -> str:
    if t.dtype.is_floating_point:
        return "d" if (keep_float64 and t.dtype == torch.float64) else "f"
    return "q"


def write_checkpoint(path, header: dict, state: dict[str, torch.Tensor], keep_float64: bool = True) -> Path:
    """Write ``state`` with a JSON ``header``.

    Float32 payloads are the default; float64 tensors keep full precision
    unless ``keep_float64`` is false.
    """
    path = Path(path)
    hdr = json.dumps(header, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hdr)), hdr, struct.pack("<I", len(state))]
    for name in sorted(state):
        t = state[name].detach().cpu()
        code = _code_for(t, keep_float64)
        # np.ascontiguousarray would promote 0-d tensors to 1-d
        arr = np.array(t.numpy(), dtype=_CODES[code], order="C")
        raw_name = name.encode()
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<cB", code.encode(), arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        chunks.append(struct.pack("<Q", len(payload)) + payload)
    path.write_bytes(b"".join(chunks))
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 5

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, hdr_len = take("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {version}")
    header = json.loads(buf[pos:pos + hdr_len].decode())
    pos += hdr_len
    (n_blobs,) = take("<I")
    state = {}
    for _ in range(n_blobs):
        (name_len,) = take("<H")
        name = buf[pos:pos + name_len].decode()
        pos += name_len
        code, ndim = take("<cB")
        dims = take(f"<{ndim}I") if ndim else ()
        (nbytes,) = take("<Q")
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(buf[pos:pos + nbytes], dtype=_CODES[code.decode()]).reshape(dims)
        pos += nbytes
        state[name] = torch.from_numpy(arr.copy())
    return header, state
