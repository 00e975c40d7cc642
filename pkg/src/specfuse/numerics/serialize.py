"""Versioned binary container for named float64 tensors.

Layout: magic string, format version (u32), tensor count (u32), then per
tensor: name length (u32) + UTF-8 bytes, rank (u32), extents (u64 each),
raw little-endian float64 payload. Used by dataset shards and checkpoints.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["write_tensors", "read_tensors", "ContainerError", "MAGIC", "VERSION"]

MAGIC = b"SPFU"
VERSION = 1


class ContainerError(IOError):
    """Corrupt, truncated, or version-mismatched container."""


def write_tensors(path, tensors):
    """Write an ordered mapping name -> ndarray to `path`."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8", order="C")
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<Q", ext))
            f.write(arr.tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated container while reading {what}")
    return buf


def read_tensors(path):
    """Read a container back as an ordered dict name -> ndarray."""
    path = Path(path)
    out = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise ContainerError(f"{path}: bad magic string")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise ContainerError(f"{path}: version {version}, expected {VERSION}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, nlen, "name").decode()
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(f, 8, "extent"))[0]
                for _ in range(rank)
            )
            nbytes = 8 * int(np.prod(shape)) if shape else 8
            raw = _read_exact(f, nbytes, f"payload of {name}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise ContainerError(f"{path}: trailing bytes after last tensor")
    return out
