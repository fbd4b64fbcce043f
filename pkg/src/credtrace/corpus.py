"""Synthetic corpus and composite-query generation.

The toy corpus gives each image a distinctive procedural composition
(smooth color field, a handful of shapes, light texture), so patches from
different images are separable while patches within one image share
structure. Composite queries are patchworks of quarter tiles lifted from
known corpus images; the generator records exactly which source filled
each cell, giving attribution experiments exact ground truth in place of a
generative model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import augment
from .images import bilinear_resize, load_image, save_image
from .patches import slot_rect

DEFAULT_IMAGE_SIZE = 128
QUERY_GRID = 4  # composite queries are 4x4 patchworks of quarter tiles


def toy_image(seed: int, size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    rng = np.random.default_rng(seed)

    # Smooth color field from upsampled low-resolution noise.
    low = rng.uniform(0.0, 1.0, size=(size // 16, size // 16, 3))
    canvas = bilinear_resize(low.astype(np.float32), size, size).astype(np.float64)

    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(4, 9)):
        color = rng.uniform(0.0, 1.0, size=3)
        alpha = rng.uniform(0.5, 0.95)
        kind = rng.integers(0, 3)
        if kind == 0:  # rectangle
            y0, x0 = rng.integers(0, size - 8, size=2)
            h = int(rng.integers(8, size // 2))
            w = int(rng.integers(8, size // 2))
            mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        elif kind == 1:  # ellipse
            cy, cx = rng.uniform(0, size, size=2)
            ry = rng.uniform(size / 16, size / 3)
            rx = rng.uniform(size / 16, size / 3)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:  # diagonal stripe band
            angle = rng.uniform(0, np.pi)
            offset = rng.uniform(0, size)
            width = rng.uniform(size / 24, size / 6)
            proj = yy * np.cos(angle) + xx * np.sin(angle)
            mask = np.abs((proj - offset) % size) < width
        canvas[mask] = (1 - alpha) * canvas[mask] + alpha * color

    canvas += rng.normal(0.0, 0.02, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)


def make_corpus(n_images: int, seed: int = 0, size: int = DEFAULT_IMAGE_SIZE,
                prefix: str = "img") -> dict[str, np.ndarray]:
    """Deterministic corpus keyed by zero-padded image ids."""
    width = max(4, len(str(n_images - 1)))
    return {
        f"{prefix}-{i:0{width}d}": toy_image(seed * 1_000_003 + i, size)
        for i in range(n_images)
    }


def write_corpus(images: dict[str, np.ndarray], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for image_id in sorted(images):
        path = directory / f"{image_id}.png"
        save_image(images[image_id], path)
        paths.append(path)
    return paths


def read_corpus(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    images = {}
    for path in sorted(directory.glob("*.png")):
        images[path.stem] = load_image(path)
    return images


@dataclass
class CompositeQuery:
    query_id: str
    pixels: np.ndarray
    sources: list[str]                       # distinct source image ids
    cells: list[dict] = field(default_factory=list)  # per-cell ground truth
    severity: float = 0.0

    def truth_dict(self) -> dict:
        return {
            "queryId": self.query_id,
            "sources": list(self.sources),
            "severity": self.severity,
            "cells": list(self.cells),
        }


def compose_query(images: dict[str, np.ndarray], source_ids: list[str], seed: int,
                  severity: float = 0.0, query_id: str | None = None) -> CompositeQuery:
    """Assemble a 4x4 patchwork pulling each cell from a random source.

    Cell (r, c) takes the source's own quarter tile at (r, c), so tile
    statistics match real image patches. Every source contributes at least
    one cell. With severity > 0 each placed tile is independently
    degraded.
    """
    if not source_ids:
        raise ValueError("need at least one source image")
    rng = np.random.default_rng(seed)
    sample = next(iter(images.values()))
    size = sample.shape[0]
    canvas = np.zeros((size, size, 3), dtype=np.float32)

    n_cells = QUERY_GRID * QUERY_GRID
    assignment = [source_ids[i % len(source_ids)] for i in range(n_cells)]
    rng.shuffle(assignment)

    cells = []
    for cell in range(n_cells):
        row, col = divmod(cell, QUERY_GRID)
        slot = 5 + cell
        source_id = assignment[cell]
        y0, x0, y1, x1 = slot_rect(slot, size, size)
        tile = images[source_id][y0:y1, x0:x1]
        if severity > 0:
            tile = augment(tile, severity, int(rng.integers(0, 2**63)))
        canvas[y0:y1, x0:x1] = tile
        cells.append({"row": row, "col": col, "slot": slot, "imageId": source_id})

    return CompositeQuery(
        query_id=query_id or f"composite-{seed}",
        pixels=canvas,
        sources=sorted(set(source_ids)),
        cells=cells,
        severity=severity,
    )


def compose_query_set(images: dict[str, np.ndarray], n_queries: int, seed: int,
                      severity: float = 0.0, min_sources: int = 2,
                      max_sources: int = 6) -> list[CompositeQuery]:
    rng = np.random.default_rng(seed)
    ids = sorted(images)
    queries = []
    for q in range(n_queries):
        n_sources = int(rng.integers(min_sources, max_sources + 1))
        chosen = [ids[k] for k in rng.choice(len(ids), size=n_sources, replace=False)]
        queries.append(compose_query(
            images, chosen, seed=int(rng.integers(0, 2**63)),
            severity=severity, query_id=f"composite-{seed}-{q:03d}"))
    return queries


def write_query(query: CompositeQuery, directory: str | Path) -> tuple[Path, Path]:
    """Write the query png plus its ground-truth sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image_path = directory / f"{query.query_id}.png"
    truth_path = directory / f"{query.query_id}.truth.json"
    save_image(query.pixels, image_path)
    truth_path.write_text(json.dumps(query.truth_dict(), indent=2, sort_keys=True))
    return image_path, truth_path


def read_truth(image_path: str | Path) -> dict:
    image_path = Path(image_path)
    truth_path = image_path.with_name(image_path.stem + ".truth.json")
    return json.loads(truth_path.read_text())
