"""Checkpoint file codec.

Layout (little-endian throughout): magic b"SVXF", u32 format version, then
one record per parameter: u32 name length, utf-8 name bytes, u32 ndim,
u32 per dimension, float64 values in row-major order. Records run to EOF.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from ..exceptions import CheckpointError, CheckpointVersionError

MAGIC = b"SVXF"
FORMAT_VERSION = 1

__all__ = ["MAGIC", "FORMAT_VERSION", "save_checkpoint", "load_checkpoint"]


def save_checkpoint(path: str, named_arrays: list[tuple[str, np.ndarray]],
                    version: int = FORMAT_VERSION) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", version))
            for name, arr in named_arrays:
                arr = np.ascontiguousarray(arr, dtype="<f8")
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(found=version, expected=FORMAT_VERSION)
    out: dict[str, np.ndarray] = {}
    off = 8
    end = len(blob)
    while off < end:
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += 8 * count
        out[name] = arr.reshape(shape).astype(np.float64)
    if off != end:
        raise CheckpointError(f"{path}: trailing bytes after last record")
    return out
