"""Binary PPM/PGM output for images in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["to_uint8", "write_ppm", "read_ppm", "write_pgm"]


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray):
    """Write an (H, W, 3) float image as P6."""
    img = to_uint8(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {img.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, _ = img.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def write_pgm(path, image: np.ndarray):
    """Write an (H, W) float image (e.g. a mask) as P5."""
    img = to_uint8(image)
    if img.ndim != 2:
        raise ValueError(f"expected (H, W), got {img.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 file written by :func:`write_ppm` back to uint8 (H, W, 3)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
