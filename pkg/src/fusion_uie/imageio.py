"""8-bit RGB PNG <-> (3,H,W) float arrays in [0,1]."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image


def decode(path) -> np.ndarray:
    """Read a PNG as a (3,H,W) float64 array via x/255.  Alpha is dropped."""
    with Image.open(path) as im:
        im.load()
        if im.format != "PNG":
            raise ValueError(f"{path}: not a PNG (format {im.format})")
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    return np.ascontiguousarray(rgb.transpose(2, 0, 1) / 255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """round(clamp(x, 0, 1) * 255) as an (H,W,3) uint8 array."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3,H,W), got {img.shape}")
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def encode(img: np.ndarray, path) -> None:
    # fixed settings (no metadata, fixed compression) keep output byte-stable
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def resize(img: np.ndarray, size: Optional[int]) -> np.ndarray:
    """Bilinear resample to size x size; ``None`` leaves the image alone."""
    if size is None:
        return img
    planes = [np.asarray(Image.fromarray(p.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR))
              for p in img]
    return np.clip(np.stack(planes).astype(np.float64), 0.0, 1.0)


def list_pngs(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() == ".png")
