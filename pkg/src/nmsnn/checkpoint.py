"""Binary checkpoint container.

Layout (little-endian)::

    8 bytes   magic b"NMSNNCK\\0"
    u32       format version (1)
    32 bytes  SHA-256 digest of the run config
    u32       metadata length L, then L bytes of UTF-8 JSON (phase marker,
              counters, RNG states, report history, config)
    u32       tensor count
    per tensor:
        u16   name length, then the UTF-8 name
        u8    dtype code (0 = float64, 1 = int64, 2 = uint8)
        u8    ndim, then ndim x u64 dimensions
        raw   C-order payload of prod(dims) * itemsize bytes
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC"]

CHECKPOINT_MAGIC = b"NMSNNCK\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1, np.dtype("uint8"): 2}


def save_checkpoint(path, config_hash: str, meta: dict, tensors: dict[str, np.ndarray]) -> Path:
    digest = bytes.fromhex(config_hash)
    if len(digest) != 32:
        raise ValueError("config hash must be a SHA-256 hex digest")
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(meta_blob)), meta_blob]
    out.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return ``(config_hash, meta, tensors)``."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    digest = data[12:44].hex()
    (mlen,) = struct.unpack_from("<I", data, 44)
    pos = 48
    meta = json.loads(data[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=n, offset=pos).reshape(shape).copy()
        pos += n * dt.itemsize
        tensors[name] = arr
    if pos != len(data):
        raise ValueError(f"{path} has trailing bytes")
    return digest, meta, tensors
