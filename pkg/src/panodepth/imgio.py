"""Image file IO: 8-bit RGB PNGs for color, PFM for depth maps.

PFM layout written here: ASCII header "Pf" (single channel), dimensions
"W H", scale line "-1.0" (negative marks little-endian), then H*W float32
values stored bottom row first.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .tensor import UsageError


def write_png(path: str, img: np.ndarray):
    """Write an (H, W, 3) image; floats are treated as [0, 1] and quantized."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise UsageError(f"write_png expects HxWx3, got {img.shape}")
    if img.dtype != np.uint8:
        img = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def read_png(path: str) -> np.ndarray:
    """Read a PNG as (H, W, 3) float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_pfm(path: str, data: np.ndarray):
    """Write a single-channel float map ("Pf", little-endian, bottom-up)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    if data.ndim != 2:
        raise UsageError(f"write_pfm expects an HxW map, got {data.shape}")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(data[::-1].astype("<f4").tobytes())


def read_pfm(path: str) -> np.ndarray:
    """Read a "Pf" float map back as (H, W) float32."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise UsageError(f"{path}: not a single-channel PFM (header {magic!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise UsageError(f"{path}: malformed PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        count = w * h
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise UsageError(f"{path}: truncated PFM payload")
    endian = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=endian).reshape(h, w)
    return np.ascontiguousarray(data[::-1]).astype(np.float32)
