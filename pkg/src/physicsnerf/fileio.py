"""PNG and PFM readers/writers."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    """Write an (H, W, 3|4) float image in [0, 1] or a uint8 image."""
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Return a uint8 array of shape (H, W, C) with C in {3, 4}."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA"):
            im = im.convert("RGBA" if "A" in im.getbands() else "RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def write_pfm(path, data: np.ndarray) -> None:
    """Single-channel little-endian PFM; rows stored bottom-to-top."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-D raster, got shape {arr.shape}")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.flipud(arr).tobytes())


_PFM_HEADER = re.compile(rb"^(P[fF])\s+(\d+)\s+(\d+)\s+(\S+)\s")


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = _PFM_HEADER.match(buf)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=m.end())
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).astype(np.float32)
