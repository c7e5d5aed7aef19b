"""Binary tensor container.

Layout: magic ``TTNS``, u32 version, u32 rank, u64 dims[rank], then
little-endian float32 payload in row-major order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TTNS"
VERSION = 1


class ContainerError(ValueError):
    pass


def save_tensor(path, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())
    return path


def load_tensor(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}")
        version, rank = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported version {version}")
        dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        payload = f.read()
    expected = int(np.prod(dims)) * 4 if rank else 4
    if rank == 0:
        dims = ()
        expected = 4
    if len(payload) != expected:
        raise ContainerError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_bundle(directory, arrays, metadata=None):
    """Persist a named set of tensors plus a JSON metadata sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {}
    for name, arr in arrays.items():
        fname = f"{name}.ttns"
        save_tensor(directory / fname, arr)
        names[name] = fname
    meta = {"tensors": names, "meta": metadata or {}}
    with open(directory / "bundle.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return directory


def load_bundle(directory):
    directory = Path(directory)
    with open(directory / "bundle.json") as f:
        meta = json.load(f)
    arrays = {
        name: load_tensor(directory / fname)
        for name, fname in meta["tensors"].items()
    }
    return arrays, meta.get("meta", {})
