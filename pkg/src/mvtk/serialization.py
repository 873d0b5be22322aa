"""Binary tensor records and weight packs.

Tensor record (all integers little-endian)::

    4 bytes   magic  b"MVTK"
    u8        version (1)
    u8        dtype   (0 = float32, 1 = float64)
    u32       rank
    rank*u64  dims
    ...       raw little-endian scalars, row-major

Weight pack: a JSON manifest followed by tensor records in manifest order::

    4 bytes   magic  b"MVTW"
    u8        version (1)
    u32       manifest length in bytes
    ...       manifest, UTF-8 JSON: {"names": [...], "spec": {...}, "dtype": "float32"}
    ...       one tensor record per name
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import FormatError

MAGIC = b"MVTK"
PACK_MAGIC = b"MVTW"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
HEADER = struct.Struct("<4sBBI")


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: expected {n} bytes of {what}, got {len(buf)}")
    return buf


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    f.write(HEADER.pack(MAGIC, VERSION, code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic, version, code, rank = HEADER.unpack(_read_exact(f, HEADER.size, "tensor header"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "dims"))
    dt = _CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    raw = _read_exact(f, count * dt.itemsize, "tensor data")
    return np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def write_pack(path, named: Iterable[tuple[str, np.ndarray]], meta: dict) -> None:
    named = list(named)
    manifest = dict(meta, names=[n for n, _ in named])
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as f:
        f.write(struct.pack("<4sBI", PACK_MAGIC, VERSION, len(blob)))
        f.write(blob)
        for _, arr in named:
            write_tensor(f, arr)


def read_pack(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(Path(path), "rb") as f:
        head = _read_exact(f, 9, "pack header")
        magic, version, n = struct.unpack("<4sBI", head)
        if magic != PACK_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {PACK_MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"unsupported pack version {version}")
        try:
            manifest = json.loads(_read_exact(f, n, "manifest").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"corrupt manifest: {e}") from e
        tensors = {name: read_tensor(f) for name in manifest.get("names", [])}
        if f.read(1):
            raise FormatError("trailing bytes after last tensor record")
    return manifest, tensors
