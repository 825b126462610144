"""Minimal binary PGM (P5) and PPM (P6) writers for selection masks."""

from __future__ import annotations

import numpy as np


def write_pgm(path, gray: np.ndarray):
    """Write a 2-D uint8 array as binary PGM."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray):
    """Write an (H, W, 3) uint8 array as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def overlay_mask(image: np.ndarray, mask_grid: np.ndarray,
                 patch_side: int) -> np.ndarray:
    """RGB overlay at image resolution; informative patches tinted green,
    placeholders dimmed red."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    lo, hi = img.min(), img.max()
    norm = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    base = (norm * 255).astype(np.uint8)
    rgb = np.stack([base, base, base], axis=2).astype(np.float64)
    up = np.kron(mask_grid > 0, np.ones((patch_side, patch_side), dtype=bool))
    rgb[up, 1] = np.minimum(255.0, rgb[up, 1] * 0.5 + 160.0)
    rgb[~up, 0] = rgb[~up, 0] * 0.4
    rgb[~up, 1] = rgb[~up, 1] * 0.4
    rgb[~up, 2] = rgb[~up, 2] * 0.4
    return rgb.astype(np.uint8)
