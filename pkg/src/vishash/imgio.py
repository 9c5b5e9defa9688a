"""PNG image I/O helpers (uint8 RGB arrays, shape H x W x 3)."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load a PNG/JPEG as an H x W x 3 uint8 RGB array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(arr: np.ndarray, path: str | os.PathLike) -> None:
    """Write an H x W x 3 uint8 array as PNG (deterministic bytes)."""
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 uint8 array, got {arr.dtype} {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def image_size(path: str | os.PathLike) -> tuple[int, int]:
    """Return (width, height) without decoding pixel data."""
    with Image.open(path) as im:
        return im.size
