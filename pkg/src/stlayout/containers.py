"""STLV binary containers for feature videos and latent traces.

Layout (all little-endian)::

    b"STLV" | u32 version | [u32 S]  | u32 N | u32 H | u32 W | u32 C | f64 data...

Version 1 holds one video (N, H, W, C). Version 2 holds a trace with a
leading step axis (S, N, H, W, C). Data is frame-major, C fastest.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError

MAGIC = b"STLV"
VIDEO_VERSION = 1
TRACE_VERSION = 2


def encode(array: np.ndarray) -> bytes:
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 4:
        header = MAGIC + struct.pack("<5I", VIDEO_VERSION, *a.shape)
    elif a.ndim == 5:
        header = MAGIC + struct.pack("<6I", TRACE_VERSION, *a.shape)
    else:
        raise ShapeError(f"STLV holds 4-D videos or 5-D traces, got shape {a.shape}")
    return header + np.ascontiguousarray(a).astype("<f8").tobytes()


def decode(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if data[:4] != MAGIC:
        raise ValidationError(f"{source}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version == VIDEO_VERSION:
        ndim = 4
    elif version == TRACE_VERSION:
        ndim = 5
    else:
        raise ValidationError(f"{source}: unsupported STLV version {version}")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(shape))
    if len(data) != offset + 8 * count:
        raise ValidationError(
            f"{source}: expected {offset + 8 * count} bytes for shape {shape}, found {len(data)}"
        )
    return np.frombuffer(data, dtype="<f8", offset=offset, count=count).reshape(shape).astype(np.float64)


def read(path) -> np.ndarray:
    return decode(Path(path).read_bytes(), str(path))


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write(path, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode(array))
