"""Portable tensor files and named-tensor archives.

Tensor record layout (little-endian)::

    b"DTNS" | version u8 (=1) | dtype u8 | rank u32 | dims u32*rank | payload

dtype codes: 0x01 float32, 0x02 uint8 (used for embedded metadata blobs).
An archive is ``u32 count`` followed by ``{u16 name_len, utf-8 name, record}``
per entry.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"DTNS"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2}
META_KEY = "__meta__"


class FormatError(ValueError):
    """Unreadable or version-mismatched tensor file."""


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f" and arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    code = CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"cannot serialise dtype {arr.dtype}")
    f.write(MAGIC)
    f.write(struct.pack("<BBI", VERSION, code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("truncated tensor record")
    return b


def read_tensor(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != MAGIC:
        raise FormatError("bad magic, not a DTNS tensor")
    version, code, rank = struct.unpack("<BBI", _read_exact(f, 6))
    if version != VERSION:
        raise FormatError(f"unsupported DTNS version {version}")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code:#x}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
    dt = DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(f, count * dt.itemsize), dtype=dt)
    return data.reshape(dims).astype(dt.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def write_archive(f: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        write_tensor(f, arr)


def read_archive(f: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, nlen).decode("utf-8")
        out[name] = read_tensor(f)
    return out


def save_archive(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries = dict(tensors)
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        entries[META_KEY] = np.frombuffer(blob, dtype=np.uint8)
    buf = io.BytesIO()
    write_archive(buf, entries)
    Path(path).write_bytes(buf.getvalue())


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        entries = read_archive(f)
    blob = entries.pop(META_KEY, None)
    meta = json.loads(blob.tobytes().decode("utf-8")) if blob is not None else {}
    return entries, meta
