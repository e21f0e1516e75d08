"""Binary checkpoint format for named parameters.

Layout: magic "AOIW", version u32, then one record per parameter:
name length u32, UTF-8 name, rank u32, dims u32 each, raw little-endian
float32 payload. Records run to end of file.
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor import F32, NnkitError, Param

MAGIC = b"AOIW"
VERSION = 1


def save_params(params: list[Param], path) -> None:
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise NnkitError("checkpoint parameter names must be unique")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", p.data.ndim))
            for d in p.data.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise NnkitError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise NnkitError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        if pos > len(blob):
            raise NnkitError("truncated checkpoint payload")
        out[name] = data.astype(F32)
    return out


def restore_params(params: list[Param], path) -> None:
    """Load a checkpoint into existing parameters, matching by name."""
    loaded = load_params(path)
    for p in params:
        if p.name not in loaded:
            raise NnkitError(f"checkpoint missing parameter {p.name!r}")
        if loaded[p.name].shape != p.data.shape:
            raise NnkitError(f"shape mismatch for {p.name!r}")
        p.data = loaded[p.name].copy()
