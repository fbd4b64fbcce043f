"""Patch fingerprint encoder: contrastive objective, model, training loop.

The similarity measure is d(a, b) = exp(cos(a, b) / tau). For a batch of
anchors phi and their augmented twins phi_hat, the loss for row i pits the
positive pair against the other anchors as negatives:

    L = -sum_i log( d(phi_i, hat_i) / (d(phi_i, hat_i) + sum_{j != i} d(phi_i, phi_j)) )

The encoder is a 4-block convolutional net over 64x64x3 inputs. The last
block's activation (8x8x64) is the feature map consumed by the match
verifier; pooling plus a dense head produces the 256-d fingerprint.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .augment import augment
from .images import bilinear_resize
from .nnet import (
    Adam,
    Conv2d,
    Dense,
    GlobalAvgPool,
    ReLU,
    collect_grads,
    collect_params,
    parameter_digest,
)
from .patches import slot_rect
from . import storage


class DegenerateBatch(ValueError):
    pass


class CorpusTooSmall(ValueError):
    pass


class DivergedTraining(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Contrastive objective
# ---------------------------------------------------------------------------

def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateBatch("zero-norm embedding")
    return x / norms, norms[:, 0]


def contrastive_loss(phi: np.ndarray, phi_hat: np.ndarray, tau: float = 0.1) -> float:
    loss, _, _ = contrastive_loss_grad(phi, phi_hat, tau)
    return loss


def contrastive_loss_grad(phi: np.ndarray, phi_hat: np.ndarray,
                          tau: float = 0.1) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus analytic gradients with respect to both raw batches.

    Inputs need not be unit vectors; cosine is taken inside. Row counts
    must match and be at least 2 (one positive needs other anchors to
    serve as negatives).
    """
    phi = np.asarray(phi, dtype=np.float64)
    phi_hat = np.asarray(phi_hat, dtype=np.float64)
    if phi.shape != phi_hat.shape or phi.ndim != 2:
        raise DegenerateBatch(f"shape mismatch: {phi.shape} vs {phi_hat.shape}")
    n = phi.shape[0]
    if n < 2:
        raise DegenerateBatch("need at least 2 pairs")

    a_unit, a_norm = _normalize_rows(phi)
    b_unit, b_norm = _normalize_rows(phi_hat)

    cos_pos = np.sum(a_unit * b_unit, axis=1)            # (n,)
    cos_neg = a_unit @ a_unit.T                          # (n, n); diag unused

    z_pos = cos_pos / tau
    z_neg = cos_neg / tau
    np.fill_diagonal(z_neg, -np.inf)                     # exclude j == i
    shift = np.maximum(z_pos, z_neg.max(axis=1))
    exp_pos = np.exp(z_pos - shift)
    exp_neg = np.exp(z_neg - shift[:, None])             # -inf -> 0 on diagonal
    denom = exp_pos + exp_neg.sum(axis=1)
    # loss_i = log(denom_i) + shift_i - z_pos_i
    loss = float(np.sum(np.log(denom) + shift - z_pos))

    # d loss / d cos terms
    g_pos = (exp_pos / denom - 1.0) / tau                # (n,)
    g_neg = (exp_neg / denom[:, None]) / tau             # (n, n), zero diagonal

    # Cosine chain rule: d cos(a_i, v) / d a_i = (v_unit - cos * a_unit_i) / |a_i|.
    m = g_neg + g_neg.T                                  # both loss rows touch pair (i, j)
    row_cos_weight = np.sum(m * cos_neg, axis=1)
    grad_a = m @ a_unit - row_cos_weight[:, None] * a_unit
    grad_a += g_pos[:, None] * (b_unit - cos_pos[:, None] * a_unit)
    grad_a /= a_norm[:, None]

    grad_b = g_pos[:, None] * (a_unit - cos_pos[:, None] * b_unit) / b_norm[:, None]
    return loss, grad_a, grad_b


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class EncoderConfig:
    input_size: int = 64
    channels: tuple = (16, 32, 64, 64)
    embed_dim: int = 256
    tau: float = 0.1
    seed: int = 0
    epochs: int = 20
    batch_size: int = 32
    lr: float = 2e-3
    min_severity: float = 0.2
    max_severity: float = 0.7
    val_fraction: float = 0.1


@dataclass
class TrainingReport:
    losses: list = field(default_factory=list)
    steps: int = 0
    epochs: int = 0
    val_margin: float = float("nan")
    wall_seconds: float = 0.0


class PatchEncoder:
    """4-block conv net; exposes fingerprints and verifier feature maps."""

    def __init__(self, config: EncoderConfig | None = None):
        self.config = config or EncoderConfig()
        c = self.config.channels
        rng = np.random.default_rng(self.config.seed)
        self.layers = {
            "conv1": Conv2d(3, c[0], stride=2, rng=rng),
            "relu1": ReLU(),
            "conv2": Conv2d(c[0], c[1], stride=2, rng=rng),
            "relu2": ReLU(),
            "conv3": Conv2d(c[1], c[2], stride=2, rng=rng),
            "relu3": ReLU(),
            "conv4": Conv2d(c[2], c[3], stride=1, rng=rng),
            "relu4": ReLU(),
            "pool": GlobalAvgPool(),
            "head": Dense(c[3], self.config.embed_dim, rng=rng),
        }

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        side = self.config.input_size // 8
        return (side, side, self.config.channels[3])

    def params(self) -> dict[str, np.ndarray]:
        return collect_params(self.layers)

    def grads(self) -> dict[str, np.ndarray]:
        return collect_grads(self.layers)

    def parameter_digest(self) -> str:
        return parameter_digest(self.params())

    # -- forward / backward over NCHW batches --

    def _forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        L = self.layers
        h = L["relu1"].forward(L["conv1"].forward(x))
        h = L["relu2"].forward(L["conv2"].forward(h))
        h = L["relu3"].forward(L["conv3"].forward(h))
        features = L["relu4"].forward(L["conv4"].forward(h))
        raw_embed = L["head"].forward(L["pool"].forward(features))
        return features, raw_embed

    def _backward(self, grad_embed: np.ndarray) -> None:
        L = self.layers
        g = L["pool"].backward(L["head"].backward(grad_embed))
        g = L["conv4"].backward(L["relu4"].backward(g))
        g = L["conv3"].backward(L["relu3"].backward(g))
        g = L["conv2"].backward(L["relu2"].backward(g))
        L["conv1"].backward(L["relu1"].backward(g))

    # -- public inference API (NHWC in, pure, batch-chunked) --

    @staticmethod
    def _to_nchw(pixels: np.ndarray) -> np.ndarray:
        arr = np.asarray(pixels, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        return arr.transpose(0, 3, 1, 2)

    def embed(self, pixels: np.ndarray, chunk: int = 128) -> np.ndarray:
        """Unit-norm fingerprints, (256,) for one image or (N, 256) for a batch."""
        single = np.asarray(pixels).ndim == 3
        x = self._to_nchw(pixels)
        outs = []
        for start in range(0, x.shape[0], chunk):
            _, raw = self._forward(x[start:start + chunk])
            norms = np.linalg.norm(raw, axis=1, keepdims=True)
            norms[norms == 0] = 1.0
            outs.append((raw / norms).astype(np.float32))
        result = np.concatenate(outs, axis=0)
        return result[0] if single else result

    def feature_map(self, pixels: np.ndarray) -> np.ndarray:
        """Pre-pooling activation as (H_f, W_f, D), or (N, H_f, W_f, D)."""
        single = np.asarray(pixels).ndim == 3
        features, _ = self._forward(self._to_nchw(pixels))
        out = features.transpose(0, 2, 3, 1)
        return out[0] if single else out

    # -- persistence --

    def save(self, path) -> None:
        cfg = asdict(self.config)
        cfg["channels"] = list(self.config.channels)
        storage.save_checkpoint(path, "patch-encoder", cfg, self.params(),
                                self.parameter_digest())

    @classmethod
    def load(cls, path) -> "PatchEncoder":
        kind, cfg, params, digest = storage.load_checkpoint(path)
        if kind != "patch-encoder":
            raise storage.FormatError(f"checkpoint holds {kind!r}, not an encoder")
        cfg["channels"] = tuple(cfg["channels"])
        model = cls(EncoderConfig(**cfg))
        own = model.params()
        for name, value in params.items():
            own[name][...] = value
        if model.parameter_digest() != digest:
            raise storage.FormatError("checkpoint digest mismatch")
        return model


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _tile_view(image: np.ndarray, slot: int, size: int) -> np.ndarray:
    y0, x0, y1, x1 = slot_rect(slot, image.shape[0], image.shape[1])
    return bilinear_resize(image[y0:y1, x0:x1], size, size)


def train_encoder(images: dict[str, np.ndarray], config: EncoderConfig | None = None,
                  ) -> tuple[PatchEncoder, TrainingReport]:
    """Train the fingerprint encoder on a corpus of images.

    Every epoch makes two passes over the training split: one on whole
    images, one on a random half/quarter tile per image, so all patch
    scales are seen. Batches never contain two patches of the same image;
    within-batch negatives must come from other images.
    """
    config = config or EncoderConfig()
    if len(images) < 100:
        raise CorpusTooSmall(f"need at least 100 images, got {len(images)}")
    started = time.monotonic()
    rng = np.random.default_rng(config.seed)
    model = PatchEncoder(config)
    report = TrainingReport()

    ids = sorted(images)
    rng.shuffle(ids)
    n_val = max(2, int(round(config.val_fraction * len(ids))))
    val_ids, train_ids = ids[:n_val], ids[n_val:]

    optimizer = Adam(model.params(), lr=config.lr)
    size = config.input_size

    for epoch in range(config.epochs):
        picks: list[tuple[str, int]] = []
        for image_id in _shuffled(train_ids, rng):
            picks.append((image_id, 0))
        for image_id in _shuffled(train_ids, rng):
            picks.append((image_id, int(rng.integers(1, 21))))

        for start in range(0, len(picks) - 1, config.batch_size):
            batch = picks[start:start + config.batch_size]
            if len(batch) < 2:
                continue
            clean = np.stack([_tile_view(images[i], s, size) for i, s in batch])
            severities = rng.uniform(config.min_severity, config.max_severity, len(batch))
            seeds = rng.integers(0, 2**63, size=len(batch))
            shaken = np.stack([
                augment(view, float(sev), int(seed))
                for view, sev, seed in zip(clean, severities, seeds)
            ])
            x = np.concatenate([clean, shaken])
            _, raw = model._forward(model._to_nchw(x))
            half = len(batch)
            loss, grad_phi, grad_hat = contrastive_loss_grad(
                raw[:half], raw[half:], config.tau)
            if not np.isfinite(loss):
                raise DivergedTraining(f"loss became {loss} at step {report.steps}")
            model._backward(np.concatenate([grad_phi, grad_hat]))
            optimizer.step(model.grads())
            report.losses.append(loss / half)
            report.steps += 1
        report.epochs = epoch + 1

    report.val_margin = validation_margin(model, {i: images[i] for i in val_ids},
                                          seed=config.seed)
    report.wall_seconds = time.monotonic() - started
    return model, report


def _shuffled(items: list, rng: np.random.Generator) -> list:
    order = list(items)
    rng.shuffle(order)
    return order


def validation_margin(model: PatchEncoder, images: dict[str, np.ndarray],
                      severity: float = 0.45, seed: int = 0) -> float:
    """Mean positive-pair cosine minus mean negative-pair cosine.

    Positives pair each image with an augmented copy; negatives are all
    cross-image pairs of clean fingerprints.
    """
    rng = np.random.default_rng(seed ^ 0x5EED)
    size = model.config.input_size
    ids = sorted(images)
    clean = np.stack([bilinear_resize(images[i], size, size) for i in ids])
    shaken = np.stack([
        augment(view, severity, int(rng.integers(0, 2**63))) for view in clean
    ])
    phi = model.embed(clean).astype(np.float64)
    phi_hat = model.embed(shaken).astype(np.float64)
    positives = np.sum(phi * phi_hat, axis=1)
    sims = phi @ phi.T
    off_diagonal = sims[~np.eye(len(ids), dtype=bool)]
    return float(positives.mean() - off_diagonal.mean())
