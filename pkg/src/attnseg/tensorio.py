"""SCTN binary tensor format.

Layout: magic ``b"SCTN"``, u8 version (1), u8 rank, rank × u32 little-endian
dims, then the float32 little-endian payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCTN"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise TensorFormatError(f"rank {arr.ndim} does not fit in a u8")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the end offset."""
    if buf[offset : offset + 4] != MAGIC:
        raise TensorFormatError(f"bad magic {bytes(buf[offset:offset + 4])!r} at offset {offset}")
    if len(buf) < offset + 6:
        raise TensorFormatError("truncated header")
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported SCTN version {version}")
    pos = offset + 6
    if len(buf) < pos + 4 * rank:
        raise TensorFormatError("truncated dimension table")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 4 * int(np.prod(shape, dtype=np.int64))
    if len(buf) < pos + nbytes:
        raise TensorFormatError(f"payload truncated: need {nbytes} bytes for shape {shape}, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
    return arr, pos + nbytes


def save_tensor(array, path) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after tensor")
    return arr
