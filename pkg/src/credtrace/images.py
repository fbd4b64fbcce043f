"""Image array helpers shared by the patch and augmentation code.

Images are numpy arrays of shape (H, W, 3), float32, values in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def as_image(array: np.ndarray) -> np.ndarray:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {arr.shape}")
    return np.clip(arr, 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return as_image(raw.astype(np.float32) / 255.0)


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return from_uint8(np.asarray(img.convert("RGB")))


def save_image(image: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path)


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    if reference.shape != test.shape:
        raise ValueError("shape mismatch")
    mse = float(np.mean((reference.astype(np.float64) - test.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (H, W, C) or (H, W) arrays with bilinear sampling.

    Uses the half-pixel-center convention, so resizing to the same shape
    is the identity.
    """
    arr = np.asarray(image, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    in_h, in_w = arr.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        out = arr.copy()
        return out[:, :, 0] if squeeze else out

    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0, in_h - 1)
    xs = np.clip(xs, 0, in_w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0).astype(np.float32)[:, None, None]
    wx = (xs - x0).astype(np.float32)[None, :, None]

    top = arr[y0][:, x0] * (1 - wx) + arr[y0][:, x1] * wx
    bottom = arr[y1][:, x0] * (1 - wx) + arr[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    out = out.astype(np.float32)
    return out[:, :, 0] if squeeze else out
