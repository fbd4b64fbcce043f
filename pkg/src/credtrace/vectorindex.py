"""Approximate nearest-neighbor search over patch fingerprints.

An inverted file splits the corpus across nlist k-means cells; within a
cell, vectors are product-quantized as residuals against the cell
centroid (m subspaces, 256 centroids each, one byte per subspace).
Queries scan the nprobe nearest cells with asymmetric distance
computation, then a shortlist is re-ranked by exact cosine against the
stored full vectors, so the final ordering is always an exact ordering of
the shortlist. Records are (imageId, slot) pairs; ties in exact
similarity break lexicographically on them.

Vectors are expected unit-normalized; squared L2 and cosine then rank
identically, and ADC works in plain L2 space.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INDEX_MAGIC = b"CTIX"
INDEX_VERSION = 1
PQ_CENTROIDS = 256
TRAIN_SAMPLE_CAP = 120_000  # quantizers train on a subsample past this


class IndexError_(ValueError):
    pass


class TooFewVectors(IndexError_):
    pass


class DimensionMismatch(IndexError_):
    pass


class EmptyIndex(IndexError_):
    pass


@dataclass
class IndexParams:
    nlist: int = 1024
    m: int = 16
    nprobe: int = 16


@dataclass
class RetrievalHit:
    image_id: str
    slot: int
    approx_distance: float | None
    exact_similarity: float
    rank: int


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2; clamp tiny negatives.
    d2 = (
        np.sum(points ** 2, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers ** 2, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centers = np.empty((k, data.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centers[0] = data[first]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i:] = data[int(rng.integers(0, n))]
            break
        probs = d2 / total
        choice = int(rng.choice(n, p=probs))
        centers[i] = data[choice]
        d2 = np.minimum(d2, np.sum((data - centers[i]) ** 2, axis=1))
    return centers


def kmeans(data: np.ndarray, k: int, seed: int, tol: float = 1e-4,
           max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ init; returns (centroids, assignment).

    Deterministic for a given seed. Empty clusters are reseeded to the
    points currently worst-served by their centroid.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if k > n:
        raise TooFewVectors(f"k={k} exceeds {n} points")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(data, k, rng)
    previous = np.inf
    assignment = np.zeros(n, dtype=np.int64)
    nearest = np.zeros(n, dtype=np.float64)
    chunk = max(1, (1 << 24) // k)  # caps the distance matrix near 128MB
    for _ in range(max_iter):
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            d2 = _pairwise_sq_dists(data[start:stop], centroids)
            assignment[start:stop] = np.argmin(d2, axis=1)
            nearest[start:stop] = d2[np.arange(stop - start),
                                     assignment[start:stop]]
        inertia = float(nearest.sum())

        counts = np.bincount(assignment, minlength=k)
        empties = np.flatnonzero(counts == 0)
        if empties.size:
            # Steal the points farthest from their assigned centroid.
            victims = np.argsort(-nearest, kind="stable")[: empties.size]
            for centroid_idx, point_idx in zip(empties, victims):
                assignment[point_idx] = centroid_idx
            counts = np.bincount(assignment, minlength=k)

        sums = np.zeros_like(centroids)
        np.add.at(sums, assignment, data)
        centroids = sums / counts[:, None]

        if previous - inertia <= tol * max(inertia, 1e-12):
            break
        previous = inertia
    return centroids, assignment


# ---------------------------------------------------------------------------
# Index
# ---------------------------------------------------------------------------

class IvfPqIndex:
    def __init__(self, params: IndexParams, dim: int):
        self.params = params
        self.dim = dim
        self.dsub = dim // params.m
        self.centroids = np.zeros((params.nlist, dim), dtype=np.float32)
        self.codebooks = np.zeros((params.m, PQ_CENTROIDS, self.dsub), dtype=np.float32)
        self.list_offsets = np.zeros(params.nlist + 1, dtype=np.int64)
        self.list_records = np.zeros(0, dtype=np.int64)
        self.list_codes = np.zeros((0, params.m), dtype=np.uint8)
        self.keys: list[tuple[str, int]] = []
        self.vectors = np.zeros((0, dim), dtype=np.float32)

    def __len__(self) -> int:
        return len(self.keys)


def build_index(vectors: np.ndarray, keys: list[tuple[str, int]],
                params: IndexParams | None = None, seed: int = 0) -> IvfPqIndex:
    """Train quantizers and encode the whole corpus.

    Quantizer training runs on a deterministic subsample when the corpus
    exceeds TRAIN_SAMPLE_CAP; assignment and encoding always cover every
    vector.
    """
    params = params or IndexParams()
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    n, dim = vectors.shape
    if len(keys) != n:
        raise IndexError_(f"{n} vectors but {len(keys)} keys")
    if dim % params.m != 0:
        raise DimensionMismatch(f"dim {dim} not divisible by m={params.m}")
    if n < params.nlist * 4:
        raise TooFewVectors(f"need at least {params.nlist * 4} vectors, got {n}")

    rng = np.random.default_rng(seed)
    if n > TRAIN_SAMPLE_CAP:
        sample_idx = np.sort(rng.choice(n, size=TRAIN_SAMPLE_CAP, replace=False))
        train = vectors[sample_idx].astype(np.float64)
    else:
        train = vectors.astype(np.float64)

    centroids, _ = kmeans(train, params.nlist, seed=seed)
    index = IvfPqIndex(params, dim)
    index.centroids = centroids.astype(np.float32)

    assignment = _assign_chunked(vectors, index.centroids)
    if n > TRAIN_SAMPLE_CAP:
        pq_train = train - centroids[assignment[sample_idx]]
    else:
        pq_train = train - centroids[assignment]

    pq_k = min(PQ_CENTROIDS, pq_train.shape[0])
    codebooks_f64 = []
    for j in range(params.m):
        sub = slice(j * index.dsub, (j + 1) * index.dsub)
        codebook, _ = kmeans(pq_train[:, sub], pq_k, seed=seed + 1 + j)
        index.codebooks[j, :pq_k] = codebook.astype(np.float32)
        if pq_k < PQ_CENTROIDS:
            # Finite-but-huge padding: inf would turn the expanded distance
            # formula into inf - inf = NaN. No code ever points here.
            index.codebooks[j, pq_k:] = 1e18
        codebooks_f64.append(codebook)

    # Residuals are never materialized corpus-wide; million-scale corpora
    # would not fit in memory otherwise.
    codes = np.zeros((n, params.m), dtype=np.uint8)
    chunk = 8192
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        resid = (vectors[start:stop].astype(np.float64)
                 - centroids[assignment[start:stop]])
        for j in range(params.m):
            sub = slice(j * index.dsub, (j + 1) * index.dsub)
            d2 = _pairwise_sq_dists(resid[:, sub], codebooks_f64[j])
            codes[start:stop, j] = np.argmin(d2, axis=1).astype(np.uint8)

    order = np.lexsort((np.arange(n), assignment))  # stable group-by-list
    grouped_records = np.asarray(order, dtype=np.int64)
    counts = np.bincount(assignment, minlength=params.nlist)
    index.list_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    index.list_records = grouped_records
    index.list_codes = codes[grouped_records]
    index.keys = [(str(a), int(b)) for a, b in keys]
    index.vectors = vectors
    return index


def _assign_chunked(vectors: np.ndarray, centroids: np.ndarray,
                    chunk: int = 8192) -> np.ndarray:
    out = np.empty(vectors.shape[0], dtype=np.int64)
    cent = centroids.astype(np.float64)
    for start in range(0, vectors.shape[0], chunk):
        block = vectors[start:start + chunk].astype(np.float64)
        out[start:start + chunk] = np.argmin(_pairwise_sq_dists(block, cent), axis=1)
    return out


def _exact_cosine(rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    q = q / max(np.linalg.norm(q), 1e-12)
    r = rows.astype(np.float64)
    norms = np.linalg.norm(r, axis=1)
    norms[norms == 0] = 1.0
    return (r @ q) / norms


def _ranked_hits(index_keys, candidate_ids, sims, approx, topk) -> list[RetrievalHit]:
    order = sorted(
        range(len(candidate_ids)),
        key=lambda i: (-sims[i], index_keys[candidate_ids[i]][0],
                       index_keys[candidate_ids[i]][1]),
    )[:topk]
    hits = []
    for rank, i in enumerate(order, start=1):
        image_id, slot = index_keys[candidate_ids[i]]
        hits.append(RetrievalHit(
            image_id=image_id, slot=slot,
            approx_distance=None if approx is None else float(approx[i]),
            exact_similarity=float(sims[i]), rank=rank,
        ))
    return hits


def search(index: IvfPqIndex, query: np.ndarray, topk: int = 30,
           nprobe: int | None = None, shortlist_factor: int = 4,
           exhaustive: bool = False) -> list[RetrievalHit]:
    """ADC scan of the nprobe nearest cells, exact re-rank of the shortlist.

    With exhaustive=True every cell is probed and the entire candidate set
    is re-ranked, which reproduces brute-force results exactly.
    """
    if len(index) == 0:
        raise EmptyIndex("no records")
    params = index.params
    nprobe = params.nlist if exhaustive else min(nprobe or params.nprobe, params.nlist)
    # Probing every list implies exact re-rank of every record: the
    # shortlist cap would otherwise let quantization noise evict true
    # neighbors even though all of them were scanned.
    exhaustive = exhaustive or nprobe >= params.nlist
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise DimensionMismatch(f"query dim {q.shape[0]} vs index dim {index.dim}")

    coarse_d2 = _pairwise_sq_dists(q[None, :], index.centroids.astype(np.float64))[0]
    probe_order = np.argsort(coarse_d2, kind="stable")[:nprobe]

    candidate_ids = []
    candidate_approx = []
    for cell in probe_order:
        start, stop = index.list_offsets[cell], index.list_offsets[cell + 1]
        if start == stop:
            continue
        records = index.list_records[start:stop]
        codes = index.list_codes[start:stop]
        q_resid = q - index.centroids[cell].astype(np.float64)
        table = np.empty((params.m, PQ_CENTROIDS))
        for j in range(params.m):
            sub = q_resid[j * index.dsub:(j + 1) * index.dsub]
            table[j] = _pairwise_sq_dists(sub[None, :],
                                          index.codebooks[j].astype(np.float64))[0]
        approx = table[np.arange(params.m)[None, :], codes].sum(axis=1)
        candidate_ids.append(records)
        candidate_approx.append(approx)

    ids = np.concatenate(candidate_ids)
    approx = np.concatenate(candidate_approx)
    if exhaustive:
        # Score the full stored matrix in record order, exactly the call
        # brute_force_search makes, so results agree bit for bit.
        approx_full = np.empty(len(index), dtype=np.float64)
        approx_full[ids] = approx
        ids = np.arange(len(index), dtype=np.int64)
        sims = _exact_cosine(index.vectors, q)
        return _ranked_hits(index.keys, ids, sims, approx_full, topk)

    keep = min(len(ids), shortlist_factor * topk)
    best = np.argpartition(approx, keep - 1)[:keep]
    ids, approx = ids[best], approx[best]
    sims = _exact_cosine(index.vectors[ids], q)
    return _ranked_hits(index.keys, ids, sims, approx, topk)


def brute_force_search(vectors: np.ndarray, keys: list[tuple[str, int]],
                       query: np.ndarray, topk: int = 30) -> list[RetrievalHit]:
    """Exact cosine top-K, the oracle the approximate path is judged against."""
    vectors = np.asarray(vectors, dtype=np.float32)
    sims = _exact_cosine(vectors, np.asarray(query, dtype=np.float64).reshape(-1))
    ids = np.arange(len(keys))
    return _ranked_hits(list(keys), ids, sims, None, topk)


# ---------------------------------------------------------------------------
# Persistence: versioned, memory-mappable layout
# ---------------------------------------------------------------------------

_ALIGN = 64


def save_index(index: IvfPqIndex, path: str | Path) -> None:
    ids_blob = bytearray()
    id_offsets = np.zeros(len(index.keys) + 1, dtype=np.uint32)
    slots = np.zeros(len(index.keys), dtype=np.uint8)
    for i, (image_id, slot) in enumerate(index.keys):
        raw = image_id.encode("utf-8")
        ids_blob.extend(raw)
        id_offsets[i + 1] = len(ids_blob)
        slots[i] = slot

    arrays = {
        "centroids": index.centroids,
        "codebooks": index.codebooks,
        "listOffsets": index.list_offsets,
        "listRecords": index.list_records,
        "listCodes": index.list_codes,
        "vectors": index.vectors,
        "idOffsets": id_offsets,
        "idBytes": np.frombuffer(bytes(ids_blob), dtype=np.uint8),
        "slots": slots,
    }

    manifest = []
    cursor = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        pad = (-cursor) % _ALIGN
        cursor += pad
        manifest.append({"name": name, "dtype": str(arr.dtype),
                         "shape": list(arr.shape), "offset": cursor, "pad": pad})
        blobs.append((pad, arr.tobytes()))
        cursor += len(blobs[-1][1])

    header = json.dumps({
        "params": {"nlist": index.params.nlist, "m": index.params.m,
                   "nprobe": index.params.nprobe},
        "dim": index.dim,
        "count": len(index.keys),
        "arrays": manifest,
    }, sort_keys=True).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<HI", INDEX_VERSION, len(header)))
        fh.write(header)
        for pad, blob in blobs:
            fh.write(b"\x00" * pad)
            fh.write(blob)


def load_index(path: str | Path, mmap: bool = False) -> IvfPqIndex:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != INDEX_MAGIC:
            raise IndexError_(f"bad magic {magic!r}")
        version, header_len = struct.unpack("<HI", fh.read(6))
        if version != INDEX_VERSION:
            raise IndexError_(f"unsupported index version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        base = 4 + 6 + header_len

        arrays = {}
        if mmap:
            for entry in header["arrays"]:
                arrays[entry["name"]] = np.memmap(
                    path, dtype=np.dtype(entry["dtype"]), mode="r",
                    offset=base + entry["offset"], shape=tuple(entry["shape"]))
        else:
            for entry in header["arrays"]:
                dtype = np.dtype(entry["dtype"])
                shape = tuple(entry["shape"])
                count = int(np.prod(shape, dtype=np.int64)) if shape else 1
                fh.seek(base + entry["offset"])
                arrays[entry["name"]] = np.frombuffer(
                    fh.read(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()

    params = IndexParams(**header["params"])
    index = IvfPqIndex(params, header["dim"])
    index.centroids = arrays["centroids"]
    index.codebooks = arrays["codebooks"]
    index.list_offsets = arrays["listOffsets"]
    index.list_records = arrays["listRecords"]
    index.list_codes = arrays["listCodes"]
    index.vectors = arrays["vectors"]
    id_offsets = arrays["idOffsets"]
    id_bytes = bytes(arrays["idBytes"])
    slots = arrays["slots"]
    index.keys = [
        (id_bytes[id_offsets[i]:id_offsets[i + 1]].decode("utf-8"), int(slots[i]))
        for i in range(header["count"])
    ]
    return index
