"""Binary file formats: embedding tables and model checkpoints.

Both formats are little-endian and versioned; layouts are documented in
docs/file_formats.md.

Embedding table (magic "CTEB"):
    header:  magic u8[4], version u16, dim u16, count u64
    row:     idLen u16, imageId utf-8 bytes, slot u8, dim x f32

Checkpoint (magic "CTCK"):
    header:  magic u8[4], version u16, headerLen u32,
             header JSON {kind, config, params: [{name, shape, dtype}], digest}
    body:    concatenated raw arrays in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

EMBED_MAGIC = b"CTEB"
EMBED_VERSION = 1
CHECKPOINT_MAGIC = b"CTCK"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def write_embeddings(path: str | Path, rows: Iterable[tuple[str, int, np.ndarray]],
                     dim: int = 256) -> int:
    """Write (imageId, slot, vector) rows; returns the row count."""
    rows = list(rows)
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<HHQ", EMBED_VERSION, dim, len(rows)))
        for image_id, slot, vec in rows:
            raw_id = image_id.encode("utf-8")
            if len(raw_id) > 0xFFFF:
                raise FormatError("imageId too long")
            if not 0 <= slot <= 0xFF:
                raise FormatError("slot out of u8 range")
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (dim,):
                raise FormatError(f"vector must be ({dim},), got {vec.shape}")
            fh.write(struct.pack("<H", len(raw_id)))
            fh.write(raw_id)
            fh.write(struct.pack("<B", slot))
            fh.write(vec.tobytes())
    return len(rows)


def read_embeddings(path: str | Path) -> Iterator[tuple[str, int, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMBED_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        version, dim, count = struct.unpack("<HHQ", fh.read(12))
        if version != EMBED_VERSION:
            raise FormatError(f"unsupported embedding file version {version}")
        for _ in range(count):
            (id_len,) = struct.unpack("<H", fh.read(2))
            image_id = fh.read(id_len).decode("utf-8")
            (slot,) = struct.unpack("<B", fh.read(1))
            vec = np.frombuffer(fh.read(4 * dim), dtype="<f4").copy()
            yield image_id, slot, vec


def read_embedding_table(path: str | Path) -> tuple[list[tuple[str, int]], np.ndarray]:
    """Load a whole embedding file as (keys, matrix)."""
    keys = []
    vectors = []
    for image_id, slot, vec in read_embeddings(path):
        keys.append((image_id, slot))
        vectors.append(vec)
    if not vectors:
        return [], np.zeros((0, 256), dtype=np.float32)
    return keys, np.stack(vectors)


def save_checkpoint(path: str | Path, kind: str, config: dict,
                    params: dict[str, np.ndarray], digest: str) -> None:
    entries = []
    blobs = []
    for name in sorted(params):
        # tobytes() already emits C order for any layout; ascontiguousarray
        # would silently turn 0-d arrays into 1-d and corrupt the shape.
        arr = np.asarray(params[name])
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(arr.tobytes())
    header = json.dumps({"kind": kind, "config": config, "params": entries,
                         "digest": digest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray], str]:
    """Returns (kind, config, params, digest); digest is re-verified by callers."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        version, header_len = struct.unpack("<HI", fh.read(6))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            dtype = np.dtype(entry["dtype"])
            size = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
            raw = fh.read(int(size))
            params[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return header["kind"], header["config"], params, header["digest"]
