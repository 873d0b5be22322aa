"""Image input for ``infer``: binary PPM (P6) or an MVTK tensor record.

Preprocessing is deterministic: nearest-neighbor resize so the shorter side
equals the target resolution, center crop to a square, scale to [0, 1].
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import FormatError
from .serialization import MAGIC, load_tensor

_PPM_HEADER = re.compile(rb"\AP6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_ppm(path) -> np.ndarray:
    """Binary PPM -> uint8/uint16 array of shape (3, H, W)."""
    raw = Path(path).read_bytes()
    m = _PPM_HEADER.match(raw)
    if not m:
        raise FormatError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad PPM header (width={w}, height={h}, maxval={maxval})")
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * 3 * dt.itemsize
    body = raw[m.end():]
    if len(body) < need:
        raise FormatError(f"{path}: truncated PPM data ({len(body)} of {need} bytes)")
    img = np.frombuffer(body[:need], dtype=dt).reshape(h, w, 3).transpose(2, 0, 1)
    return img.astype(np.float32) / maxval


def write_ppm(path, img: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] -> 8-bit P6."""
    arr = np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = arr.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def load_image(path) -> np.ndarray:
    """Read a PPM or MVTK tensor file as a float32 (3, H, W) array."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == MAGIC:
        arr = load_tensor(path)
        if arr.ndim == 4 and arr.shape[0] == 1:
            arr = arr[0]
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise FormatError(f"{path}: tensor image must be (3, H, W) or (1, 3, H, W), got {arr.shape}")
        return arr.astype(np.float32)
    return read_ppm(path)


def preprocess(img: np.ndarray, res: int) -> np.ndarray:
    """Nearest-neighbor resize (shorter side -> res), center crop, add batch axis."""
    _, h, w = img.shape
    scale = res / min(h, w)
    nh, nw = max(res, round(h * scale)), max(res, round(w * scale))
    rows = np.minimum((np.arange(nh) / scale).astype(np.int64), h - 1)
    cols = np.minimum((np.arange(nw) / scale).astype(np.int64), w - 1)
    top, left = (nh - res) // 2, (nw - res) // 2
    out = img[:, rows[top:top + res]][:, :, cols[left:left + res]]
    return np.ascontiguousarray(out[None], dtype=np.float32)
