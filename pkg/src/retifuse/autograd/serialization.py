"""FTEN tensor records and named-tensor archives.

FTEN record layout (all little-endian)::

    b"FTEN" | version u16 | rank u16 | extents u64 * rank | float32 * prod(extents)

An archive is a text header line, a JSON manifest mapping each tensor name to
its byte offset inside the data section, then the concatenated FTEN records.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FTEN"
VERSION = 1
ARCHIVE_MAGIC = "RETIFUSE-ARCHIVE"
ARCHIVE_VERSION = 1


class FormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    head = MAGIC + struct.pack("<HH", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("missing FTEN magic")
    version, rank = struct.unpack_from("<HH", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported FTEN version {version}")
    pos = offset + 8
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    end = pos + 4 * count
    if end > len(buf):
        raise FormatError("truncated FTEN record")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
    return arr, end


def save_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after FTEN record")
    return arr


def save_archive(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], metadata: dict | None = None) -> None:
    body = io.BytesIO()
    entries = []
    for name, arr in tensors.items():
        rec = encode(arr)
        entries.append({"name": name, "offset": body.tell(), "shape": list(np.shape(arr))})
        body.write(rec)
    manifest = json.dumps({"version": ARCHIVE_VERSION, "metadata": metadata or {}, "tensors": entries},
                          sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(f"{ARCHIVE_MAGIC} {ARCHIVE_VERSION} {len(manifest)}\n".encode())
        fh.write(manifest)
        fh.write(body.getvalue())


def load_archive(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    newline = buf.find(b"\n")
    try:
        magic, version, length = buf[:newline].decode().split()
    except ValueError:
        raise FormatError(f"{path}: not a tensor archive") from None
    if magic != ARCHIVE_MAGIC or int(version) != ARCHIVE_VERSION:
        raise FormatError(f"{path}: unsupported archive header {buf[:newline]!r}")
    start = newline + 1
    manifest = json.loads(buf[start:start + int(length)])
    data = buf[start + int(length):]
    tensors = {}
    for entry in manifest["tensors"]:
        arr, _ = decode(data, entry["offset"])
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"{path}: tensor {entry['name']} shape disagrees with manifest")
        tensors[entry["name"]] = arr
    return tensors, manifest["metadata"]
