"""Binary checkpoint format.

Layout (all integers u32 little-endian)::

    b"LSRG0001" | count | count x (name_len, utf-8 name, ndim, dims..., float32 LE data)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..core import ParamStore, Tensor
from ..errors import ConfigError, DataError

MAGIC = b"LSRG0001"


def encode_checkpoint(params: Mapping[str, np.ndarray | Tensor] | ParamStore) -> bytes:
    items = params.items()
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name, value in items:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise DataError(f"not a checkpoint: {source} does not start with {MAGIC!r}")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DataError(f"truncated checkpoint {source}")
        out = blob[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"corrupt parameter name in {source}") from None
        if name in out:
            raise DataError(f"duplicate parameter {name!r} in checkpoint {source}")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(blob):
        raise DataError(f"trailing bytes after last array in checkpoint {source}")
    return out


def save_checkpoint(params, path: str | Path) -> None:
    names = list(params.keys()) if isinstance(params, Mapping) else list(params)
    if len(set(names)) != len(names):
        raise ConfigError("duplicate parameter names cannot be checkpointed")
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def load_into(store: ParamStore, path: str | Path, strict: bool = True) -> None:
    """Copy checkpointed arrays into ``store``; shape mismatches name the parameter."""
    store.load_state_dict(load_checkpoint(path), strict=strict)
