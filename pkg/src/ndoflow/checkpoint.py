"""Versioned binary checkpoints with a JSON metadata sidecar.

Layout (all integers little-endian):
  magic  8s   b"NDFLOWCK"
  version u32 (currently 1)
  count  u32  number of named arrays
  per array:
    name_len u32, name utf-8, dtype_len u32, dtype str (numpy little-endian
    descr, e.g. "<f8"), ndim u32, shape u64 * ndim, raw array bytes (C order)

The sidecar ``<path>.json`` carries free-form metadata (model hyperparams,
training provenance). Both files are written atomically via rename so a
crash mid-save never leaves a truncated checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Tuple

import numpy as np

MAGIC = b"NDFLOWCK"
VERSION = 1
_ALLOWED_DTYPES = ("<f8", "<f4", "<i8")


class CheckpointError(RuntimeError):
    pass


def _atomic_write(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        shape = arr.shape  # ascontiguousarray would promote 0-d to 1-d
        data = np.ascontiguousarray(arr)
        descr = arr.dtype.newbyteorder("<").str
        if descr not in _ALLOWED_DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for entry '{name}'")
        nb = name.encode("utf-8")
        db = descr.encode("ascii")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", len(db)))
        parts.append(db)
        parts.append(struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape) if shape else b"")
        parts.append(data.astype(descr, copy=False).tobytes(order="C"))
    _atomic_write(path, b"".join(parts))
    _atomic_write(path + ".json", json.dumps(meta, indent=2, sort_keys=True).encode("utf-8"))


def load_checkpoint(path: str) -> Tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (dlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            descr = blob[off:off + dlen].decode("ascii")
            off += dlen
            if descr not in _ALLOWED_DTYPES:
                raise CheckpointError(f"{path}: unsupported dtype {descr!r}")
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, off) if ndim else ()
            off += 8 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(descr).itemsize
            if off + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated entry '{name}'")
            arrays[name] = np.frombuffer(
                blob[off:off + nbytes], dtype=descr).reshape(shape).copy()
            off += nbytes
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint") from e
    sidecar = path + ".json"
    meta: dict = {}
    if os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as f:
            meta = json.load(f)
    return arrays, meta
