"""Shared fixtures.

The expensive artifacts (trained encoder, trained verifier, corpus,
index) are session-scoped and built once; their wall-clock build times
are recorded in TIMINGS so end-to-end budget checks can include them.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

# wall-clock seconds for expensive fixture builds, keyed by name
TIMINGS: dict[str, float] = {}


def record_timing(name: str, seconds: float) -> None:
    TIMINGS[name] = seconds


def unit_rows(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


def scaled_noise(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    """Gaussian direction rescaled to a fixed total norm."""
    n = rng.normal(size=shape)
    n *= scale / np.linalg.norm(n, axis=-1, keepdims=True)
    return n


def clustered_unit_vectors(n: int, dim: int, n_centers: int, vec_sigma: float,
                           seed: int) -> np.ndarray:
    """Unit vectors grouped around random centers, like real embeddings.

    Uniform random vectors are nearly orthogonal in high dimension and
    make coarse quantization meaningless; clustered data is the regime
    the index actually faces.
    """
    rng = np.random.default_rng(seed)
    centers = unit_rows(rng.normal(size=(n_centers, dim)))
    assign = rng.integers(0, n_centers, size=n)
    vecs = centers[assign] + scaled_noise(rng, (n, dim), vec_sigma)
    return unit_rows(vecs).astype(np.float32)


def perturbed_queries(vectors: np.ndarray, count: int, sigma: float,
                      seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Queries drawn as noisy copies of random corpus rows.

    Returns (queries, source_row_indices). The brute-force nearest
    neighbor is computed by the caller; the source index is advisory.
    """
    rng = np.random.default_rng(seed)
    src = rng.integers(0, vectors.shape[0], size=count)
    qs = vectors[src].astype(np.float64) + scaled_noise(
        rng, (count, vectors.shape[1]), sigma)
    return unit_rows(qs), src


@pytest.fixture(scope="session")
def toy_corpus_500():
    from credtrace.corpus import make_corpus

    return make_corpus(500, seed=11, size=128)


@pytest.fixture(scope="session")
def trained_encoder(toy_corpus_500):
    """Encoder trained once per session on the frozen 500-image corpus."""
    from credtrace.encoder import EncoderConfig, train_encoder

    t0 = time.time()
    model, report = train_encoder(toy_corpus_500, EncoderConfig(epochs=20,
                                                                seed=0))
    record_timing("train_encoder_500", time.time() - t0)
    return model, report


@pytest.fixture(scope="session")
def trained_verifier(toy_corpus_500, trained_encoder):
    from credtrace.verifier import VerifierConfig, train_verifier

    encoder, _ = trained_encoder
    t0 = time.time()
    model, report = train_verifier(toy_corpus_500, encoder,
                                   VerifierConfig(epochs=12, seed=0))
    record_timing("train_verifier_500", time.time() - t0)
    return model, report


@pytest.fixture(scope="session")
def corpus_index_500(toy_corpus_500, trained_encoder):
    """IVFPQ index over all 21 patches of the 500-image corpus."""
    from credtrace.pipeline import corpus_patch_vectors
    from credtrace.vectorindex import IndexParams, build_index

    encoder, _ = trained_encoder
    t0 = time.time()
    keys, vecs = corpus_patch_vectors(toy_corpus_500, encoder)
    index = build_index(vecs, keys, IndexParams(nlist=64, m=16, nprobe=8),
                        seed=0)
    record_timing("build_index_500", time.time() - t0)
    return index


@pytest.fixture(scope="session")
def descriptor_cache_500(toy_corpus_500, trained_verifier):
    """Pooled verifier descriptors for every corpus patch."""
    from credtrace.patches import patchify, resample_patch

    verifier, _ = trained_verifier
    size = verifier.encoder.config.input_size
    t0 = time.time()
    cache = {}
    for image_id in sorted(toy_corpus_500):
        for patch in patchify(toy_corpus_500[image_id], image_id):
            cache[(image_id, patch.slot)] = verifier.pooled(
                resample_patch(patch, size))
    record_timing("descriptor_cache_500", time.time() - t0)
    return cache


@pytest.fixture(scope="session")
def index_corpus_10k():
    """10k clustered 256-d unit vectors with (imageId, slot) keys."""
    vecs = clustered_unit_vectors(10_000, 256, n_centers=200, vec_sigma=0.25,
                                  seed=7)
    keys = [(f"img{i:05d}", i % 21) for i in range(10_000)]
    return vecs, keys


@pytest.fixture(scope="session")
def ivfpq_10k(index_corpus_10k):
    from credtrace.vectorindex import IndexParams, build_index

    vecs, keys = index_corpus_10k
    t0 = time.time()
    index = build_index(vecs, keys, IndexParams(nlist=64, m=16, nprobe=8),
                        seed=0)
    record_timing("build_index_10k", time.time() - t0)
    return index
