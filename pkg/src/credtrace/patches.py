"""The 21-tile decomposition of an image.

Slot layout, fixed across the whole pipeline:

    slot 0      the whole image
    slots 1-4   the four H/2 x W/2 tiles, row-major
    slots 5-20  the sixteen H/4 x W/4 tiles, row-major

Integer division leaves remainders on odd sizes; those extra pixels are
absorbed by the last row and column of tiles, so each scale partitions the
image exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .images import bilinear_resize

PATCHES_PER_IMAGE = 21


class ImageTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class Patch:
    image_id: str
    slot: int
    pixels: np.ndarray  # the raw tile crop, (h, w, 3) float32
    rect: tuple[int, int, int, int]  # y0, x0, y1, x1 in source coordinates

    @property
    def key(self) -> tuple[str, int]:
        return (self.image_id, self.slot)


def _grid_bounds(size: int, parts: int) -> list[tuple[int, int]]:
    step = size // parts
    bounds = [(i * step, (i + 1) * step) for i in range(parts)]
    last = bounds[-1]
    bounds[-1] = (last[0], size)  # remainder pixels go to the last tile
    return bounds


def slot_rect(slot: int, height: int, width: int) -> tuple[int, int, int, int]:
    """Source rectangle (y0, x0, y1, x1) for a slot index."""
    if slot == 0:
        return (0, 0, height, width)
    if 1 <= slot <= 4:
        parts, base = 2, 1
    elif 5 <= slot <= 20:
        parts, base = 4, 5
    else:
        raise ValueError(f"slot must be 0..20, got {slot}")
    row, col = divmod(slot - base, parts)
    ys = _grid_bounds(height, parts)[row]
    xs = _grid_bounds(width, parts)[col]
    return (ys[0], xs[0], ys[1], xs[1])


def patchify(image: np.ndarray, image_id: str) -> list[Patch]:
    """Decompose an image into its 21 patches, slots 0..20 in order."""
    height, width = image.shape[:2]
    if height < 8 or width < 8:
        raise ImageTooSmall(f"need at least 8x8 pixels, got {height}x{width}")
    patches = []
    for slot in range(PATCHES_PER_IMAGE):
        y0, x0, y1, x1 = slot_rect(slot, height, width)
        patches.append(Patch(
            image_id=image_id,
            slot=slot,
            pixels=np.ascontiguousarray(image[y0:y1, x0:x1]),
            rect=(y0, x0, y1, x1),
        ))
    return patches


def reassemble(patches: list[Patch], scale: str = "quarter") -> np.ndarray:
    """Stitch one scale's tiles back into the full image.

    scale: "whole" (slot 0), "half" (1-4), or "quarter" (5-20).
    """
    base, parts = {"whole": (0, 1), "half": (1, 2), "quarter": (5, 4)}[scale]
    by_slot = {p.slot: p for p in patches}
    wanted = range(base, base + parts * parts)
    if not all(s in by_slot for s in wanted):
        raise ValueError(f"missing slots for scale {scale!r}")
    rows = []
    for r in range(parts):
        row = [by_slot[base + r * parts + c].pixels for c in range(parts)]
        rows.append(np.concatenate(row, axis=1))
    return np.concatenate(rows, axis=0)


def resample_patch(patch: Patch, size: int) -> np.ndarray:
    """The encoder-input view of a patch: (size, size, 3) float32."""
    return bilinear_resize(patch.pixels, size, size)
