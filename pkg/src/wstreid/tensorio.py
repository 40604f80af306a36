"""Binary tensor container used for dataset payloads and checkpoints.

Each entry serializes one float64 tensor as the 8-byte magic ``DFMLTNSR``,
a little-endian u32 rank, one little-endian u64 per dimension, and the raw
little-endian float64 payload in row-major order, followed by a u32 key
length and the UTF-8 key naming the entry.  A container file is simply the
concatenation of entries; writers emit keys in sorted order so identical
contents produce identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"DFMLTNSR"


def write_entry(fp, key: str, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    fp.write(MAGIC)
    fp.write(struct.pack("<I", arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fp.write(arr.tobytes())
    encoded = key.encode("utf-8")
    fp.write(struct.pack("<I", len(encoded)))
    fp.write(encoded)


def _read_exact(fp, count: int, what: str) -> bytes:
    data = fp.read(count)
    if len(data) != count:
        raise ParseError(f"tensor container truncated while reading {what}")
    return data


def read_entry(fp) -> tuple[str, np.ndarray] | None:
    """Read one entry, or return None at a clean end of file."""
    head = fp.read(len(MAGIC))
    if not head:
        return None
    if head != MAGIC:
        raise ParseError(f"bad tensor container magic {head!r}")
    (rank,) = struct.unpack("<I", _read_exact(fp, 4, "rank"))
    dims = struct.unpack(f"<{rank}Q", _read_exact(fp, 8 * rank, "dims"))
    count = 1
    for d in dims:
        count *= d
    payload = _read_exact(fp, 8 * count, "payload")
    arr = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    (key_len,) = struct.unpack("<I", _read_exact(fp, 4, "key length"))
    key = _read_exact(fp, key_len, "key").decode("utf-8")
    return key, arr


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fp:
        for key in sorted(tensors):
            write_entry(fp, key, tensors[key])


def load_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fp:
        while True:
            entry = read_entry(fp)
            if entry is None:
                return out
            key, arr = entry
            if key in out:
                raise ParseError(f"duplicate tensor key {key!r} in {path}")
            out[key] = arr
