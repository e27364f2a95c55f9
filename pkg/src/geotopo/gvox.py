"""GVOX binary volume format.

Layout (little-endian)::

    bytes 0-3    magic b"GVOX"
    bytes 4-7    u32 format version
    bytes 8-15   reserved, zero
    4 x u32      C, H, W, D
    u8           dtype tag: 0 = u8 labels, 1 = f32 values
    payload      u8 labels: H*W*D row-major
                 f32 values: C*H*W*D, channel-major then row-major

For label volumes ``C`` records the number of classes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GVOX"
VERSION = 1
TAG_LABELS = 0
TAG_FLOAT32 = 1

_HEADER = struct.Struct("<4sI8s4IB")


class GVoxError(ValueError):
    pass


def encode(array, channels: int | None = None) -> bytes:
    """Serialize a label grid (3D integer) or a float map (4D)."""
    array = np.asarray(array)
    if array.ndim == 3:
        if not np.issubdtype(array.dtype, np.integer):
            raise GVoxError("3D arrays must be integer label grids")
        if array.size and (array.min() < 0 or array.max() > 255):
            raise GVoxError("labels must fit in u8")
        C = int(channels if channels is not None else array.max(initial=0) + 1)
        H, W, D = array.shape
        header = _HEADER.pack(MAGIC, VERSION, bytes(8), C, H, W, D, TAG_LABELS)
        return header + np.ascontiguousarray(array, dtype="<u1").tobytes()
    if array.ndim == 4:
        C, H, W, D = array.shape
        header = _HEADER.pack(MAGIC, VERSION, bytes(8), C, H, W, D, TAG_FLOAT32)
        return header + np.ascontiguousarray(array, dtype="<f4").tobytes()
    raise GVoxError(f"cannot encode array of shape {array.shape}")


def decode(data: bytes):
    """Parse GVOX bytes; returns ``(array, channels)``."""
    if len(data) < _HEADER.size:
        raise GVoxError("truncated header")
    magic, version, _, C, H, W, D, tag = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise GVoxError(f"bad magic {magic!r}")
    if version != VERSION:
        raise GVoxError(f"unsupported version {version}")
    body = data[_HEADER.size:]
    if tag == TAG_LABELS:
        n = H * W * D
        if len(body) != n:
            raise GVoxError(f"expected {n} payload bytes, got {len(body)}")
        return np.frombuffer(body, dtype="<u1").reshape(H, W, D).astype(np.int64), C
    if tag == TAG_FLOAT32:
        n = 4 * C * H * W * D
        if len(body) != n:
            raise GVoxError(f"expected {n} payload bytes, got {len(body)}")
        return np.frombuffer(body, dtype="<f4").reshape(C, H, W, D).astype(float), C
    raise GVoxError(f"unknown dtype tag {tag}")


def save(path, array, channels: int | None = None) -> None:
    Path(path).write_bytes(encode(array, channels))


def load(path):
    return decode(Path(path).read_bytes())
