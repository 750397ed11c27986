"""PNG (8-bit) and PFM (32-bit float) image I/O.

Images are (3, H, W) float arrays in [0, 1] throughout the package;
PFM is the lossless metric-grade format (standard "PF" header,
little-endian, bottom-up scanlines).
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import FormatError


def write_png(image, path) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"expected (3, H, W) image, got shape {img.shape}")
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.moveaxis(u8, 0, -1), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(np.moveaxis(arr, -1, 0))


def write_pfm(image, path) -> None:
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"expected (3, H, W) image, got shape {img.shape}")
    _, h, w = img.shape
    rows = np.moveaxis(img, 0, -1)[::-1]  # bottom-up, RGB interleaved
    with open(path, "wb") as f:
        f.write(b"PF\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(np.ascontiguousarray(rows).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"PF":
            raise FormatError(f"{path}: not a color PFM file (magic {magic!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError(f"{path}: malformed PFM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        payload = np.frombuffer(f.read(), dtype=dtype, count=w * h * 3)
    if payload.size != w * h * 3:
        raise FormatError(f"{path}: PFM payload truncated")
    rows = payload.reshape(h, w, 3)[::-1]
    return np.ascontiguousarray(np.moveaxis(rows, -1, 0)).astype(np.float32)
