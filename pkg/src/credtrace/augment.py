"""Seeded photometric and geometric degradations.

Each operation takes pixels in [0, 1], a severity knob in [0, 1], and a
numpy Generator; severity 0 is the identity for the whole pipeline. The set
covers color jitter, Gaussian blur, random resized crop, rotation up to 30
degrees, JPEG-style block quantization, and additive Gaussian noise.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from .images import bilinear_resize

MAX_ROTATION_DEG = 30.0

# Luminance quantization table from the JPEG reference implementation;
# scaled by severity to emulate falling quality settings.
_JPEG_QUANT = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def color_jitter(pixels: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    if severity <= 0:
        return pixels.copy()
    out = pixels.astype(np.float64)
    brightness = 1.0 + rng.uniform(-0.5, 0.5) * severity
    contrast = 1.0 + rng.uniform(-0.5, 0.5) * severity
    saturation = 1.0 + rng.uniform(-0.8, 0.8) * severity
    hue_angle = rng.uniform(-np.pi / 5, np.pi / 5) * severity

    out = out * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out @ np.array([0.299, 0.587, 0.114])
    out = gray[:, :, None] + (out - gray[:, :, None]) * saturation
    # Hue: rotate rgb about the achromatic axis.
    axis = np.full(3, 1.0 / np.sqrt(3.0))
    c, s = np.cos(hue_angle), np.sin(hue_angle)
    cross = np.array([[0, -axis[2], axis[1]],
                      [axis[2], 0, -axis[0]],
                      [-axis[1], axis[0], 0]])
    rot = c * np.eye(3) + s * cross + (1 - c) * np.outer(axis, axis)
    out = out @ rot.T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gaussian_blur(pixels: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    if severity <= 0:
        return pixels.copy()
    sigma = rng.uniform(0.4, 1.0) * 2.5 * severity
    out = ndimage.gaussian_filter(pixels.astype(np.float64), sigma=(sigma, sigma, 0))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def random_resized_crop(pixels: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    if severity <= 0:
        return pixels.copy()
    h, w = pixels.shape[:2]
    area = rng.uniform(1.0 - 0.6 * severity, 1.0)
    aspect = np.exp(rng.uniform(-0.3, 0.3) * severity)
    crop_h = max(4, min(h, int(round(h * np.sqrt(area) / np.sqrt(aspect)))))
    crop_w = max(4, min(w, int(round(w * np.sqrt(area) * np.sqrt(aspect)))))
    y0 = rng.integers(0, h - crop_h + 1)
    x0 = rng.integers(0, w - crop_w + 1)
    crop = pixels[y0:y0 + crop_h, x0:x0 + crop_w]
    return bilinear_resize(crop, h, w)


def rotate(pixels: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    if severity <= 0:
        return pixels.copy()
    angle = rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG) * severity
    out = ndimage.rotate(pixels.astype(np.float64), angle, reshape=False,
                         order=1, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def jpeg_quantize(pixels: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    """Block-DCT quantization, the signature artifact of low JPEG quality."""
    if severity <= 0:
        return pixels.copy()
    quality_scale = 1.0 + rng.uniform(2.0, 8.0) * severity
    quant = _JPEG_QUANT * quality_scale / 255.0
    h, w = pixels.shape[:2]
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    padded = np.pad(pixels.astype(np.float64), ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    ph, pw = padded.shape[:2]
    out = np.empty_like(padded)
    for c in range(3):
        # (ph/8, pw/8, 8, 8) view of the channel's 8x8 blocks
        blocks = padded[:, :, c].reshape(ph // 8, 8, pw // 8, 8).transpose(0, 2, 1, 3)
        coeffs = dctn(blocks, axes=(2, 3), norm="ortho")
        coeffs = np.round(coeffs / quant) * quant
        restored = idctn(coeffs, axes=(2, 3), norm="ortho")
        out[:, :, c] = restored.transpose(0, 2, 1, 3).reshape(ph, pw)
    return np.clip(out[:h, :w], 0.0, 1.0).astype(np.float32)


def gaussian_noise(pixels: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    if severity <= 0:
        return pixels.copy()
    sigma = rng.uniform(0.3, 1.0) * 0.12 * severity
    out = pixels.astype(np.float64) + rng.normal(0.0, sigma, size=pixels.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


PIPELINE = (
    ("color_jitter", color_jitter),
    ("gaussian_blur", gaussian_blur),
    ("random_resized_crop", random_resized_crop),
    ("rotate", rotate),
    ("jpeg_quantize", jpeg_quantize),
    ("gaussian_noise", gaussian_noise),
)


def augment(pixels: np.ndarray, severity: float, seed: int,
            ops: tuple[str, ...] | None = None) -> np.ndarray:
    """Apply a random subset of the degradation pipeline.

    Deterministic for a given (pixels, severity, seed, ops). Each op fires
    with probability 0.7 (at least one always fires when severity > 0).
    """
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must be in [0, 1]")
    if severity == 0.0:
        return pixels.copy()
    rng = np.random.default_rng(seed)
    enabled = set(ops) if ops is not None else {name for name, _ in PIPELINE}
    gates = {name: (name in enabled and rng.random() < 0.7) for name, _ in PIPELINE}
    if not any(gates.values()) and enabled:
        forced = sorted(enabled)[int(rng.integers(0, len(enabled)))]
        gates[forced] = True
    out = pixels
    for name, op in PIPELINE:
        if gates[name]:
            out = op(out, severity, rng)
    return out if out is not pixels else pixels.copy()
