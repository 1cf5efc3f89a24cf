"""Grayscale image I/O and pixel-grid helpers.

Images are float64 arrays in [0, 1], shape (H, W) for the default single
channel or (H, W, C). On disk they are 16-bit grayscale PNG. The loader
snaps loaded values to the dyadic grid of multiples of 2**-20: the grid is
~16x finer than one 16-bit quantum, so no information is lost, and it makes
the spectral filter's additive decomposition exact in float64 (a 21-bit
integer minus a 22-bit integer re-adds without rounding).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

GRID_BITS = 20
_GRID = float(2**GRID_BITS)
_U16_MAX = 65535


def snap_to_grid(image: np.ndarray) -> np.ndarray:
    """Round pixel values to exact multiples of 2**-20."""
    return np.round(np.asarray(image, dtype=np.float64) * _GRID) / _GRID


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] float image as 16-bit grayscale PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {arr.shape}")
    quant = np.round(np.clip(arr, 0.0, 1.0) * _U16_MAX).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(quant, mode="I;16").save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    """Read a grayscale PNG (8- or 16-bit) as a [0, 1] float64 array."""
    with PILImage.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected grayscale raster, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        scale = 255.0
    else:
        arr = arr.astype(np.uint32)
        scale = float(_U16_MAX)
    return snap_to_grid(arr.astype(np.float64) / scale)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB against a [0, 1] reference."""
    err = mse(image, reference)
    if err == 0.0:
        return float("inf")
    return float(-10.0 * np.log10(err))
