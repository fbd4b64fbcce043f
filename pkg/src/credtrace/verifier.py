"""Pairwise match verification between patches.

Retrieval by fingerprint similarity produces candidates; this module
decides whether a candidate actually matches the query. Both patches are
run through the frozen encoder to feature maps, pooled over a fixed
55-window pyramid into descriptor matrices, correlated, and the flattened
correlation is scored by a small trained network. The score is symmetric
in its two inputs by construction, and bit-exactly so because each pair
is put into a canonical order before any arithmetic.

Only the scoring network trains. The channel reduction ahead of pooling
is a frozen seeded projection, and the encoder backbone stays fixed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import storage
from .augment import augment
from .encoder import CorpusTooSmall, DivergedTraining, EncoderConfig, PatchEncoder
from .images import bilinear_resize
from .nnet import Adam, Dense, ReLU, collect_grads, collect_params, parameter_digest
from .patches import slot_rect

WINDOW_SCALES = (1, 2, 3, 4, 5)  # 1+4+9+16+25 = 55 windows
N_WINDOWS = sum(s * s for s in WINDOW_SCALES)


class NonSquareMap(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# Windows and pooling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    top: int
    left: int
    height: int
    width: int


def generate_windows(h_f: int, w_f: int) -> list[Window]:
    """Multi-scale window pyramid: s*s square windows per scale s = 1..5.

    Window side at scale s is ceil(2*min(H,W)/(s+1)), corners spread
    evenly over the valid range, everything clamped in bounds.
    """
    if h_f != w_f:
        raise NonSquareMap(f"feature map {h_f}x{w_f} is not square")
    windows = []
    for s in WINDOW_SCALES:
        side = min(math.ceil(2 * min(h_f, w_f) / (s + 1)), h_f)
        span = h_f - side
        for iy in range(s):
            for ix in range(s):
                top = round(iy * span / (s - 1)) if s > 1 else 0
                left = round(ix * span / (s - 1)) if s > 1 else 0
                windows.append(Window(top, left, side, side))
    return windows


def pool_windows(feature_map: np.ndarray, windows: list[Window],
                 reduction: np.ndarray, p: float = 3.0) -> np.ndarray:
    """Reduce channels, then GeM-pool each window and unit-normalize rows.

    Row w is (mean over window of relu(reduced)^p)^(1/p), length-normalized.
    """
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim != 3:
        raise ShapeMismatch(f"expected (H, W, D) map, got {fmap.shape}")
    if reduction.shape[0] != fmap.shape[2]:
        raise ShapeMismatch(
            f"map has {fmap.shape[2]} channels, reduction expects {reduction.shape[0]}")
    reduced = np.maximum(fmap @ reduction, 0.0) ** p
    rows = np.empty((len(windows), reduction.shape[1]))
    for i, w in enumerate(windows):
        block = reduced[w.top:w.top + w.height, w.left:w.left + w.width]
        rows[i] = block.mean(axis=(0, 1)) ** (1.0 / p)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return rows / np.maximum(norms, 1e-6)


def correlate(f_q: np.ndarray, f_i: np.ndarray) -> np.ndarray:
    if f_q.shape != f_i.shape or f_q.ndim != 2:
        raise ShapeMismatch(f"descriptor shapes {f_q.shape} vs {f_i.shape}")
    return f_q @ f_i.T


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class VerifierConfig:
    gem_power: float = 3.0
    reduced_dim: int = 16
    hidden: tuple = (512, 128)
    queue_size: int = 2 ** 14
    hard_neg_k: int = 20
    seed: int = 0
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-3
    # Augmentation for positives keeps >= 64% of the anchor's content at
    # max severity; mixture negatives keep <= 50%. The gap is what the
    # scorer learns to separate, so keep max_severity below ~0.7.
    min_severity: float = 0.3
    max_severity: float = 0.6
    mixture_negatives: int = 1
    grid_negatives: int = 1
    patch_positives: int = 1
    patch_hard_k: int = 6
    easy_negatives: int = 4
    val_fraction: float = 0.15
    auc_floor: float = 0.95


@dataclass
class VerifierReport:
    losses: list = field(default_factory=list)
    steps: int = 0
    val_auc: float = float("nan")
    median_positive: float = float("nan")
    median_negative: float = float("nan")


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


class VerifierModel:
    """Frozen encoder + frozen reduction + trained pair scorer."""

    KIND = "match-verifier"

    def __init__(self, encoder: PatchEncoder, config: VerifierConfig | None = None):
        self.encoder = encoder
        self.config = config or VerifierConfig()
        h_f, w_f, depth = encoder.feature_shape
        self.windows = generate_windows(h_f, w_f)
        rng = np.random.default_rng(self.config.seed)
        self.reduction = rng.normal(0.0, 1.0 / np.sqrt(depth),
                                    (depth, self.config.reduced_dim))
        flat = len(self.windows) ** 2
        h1, h2 = self.config.hidden
        self.scorer = {
            "fc1": Dense(flat, h1, rng=rng),
            "relu1": ReLU(),
            "fc2": Dense(h1, h2, rng=rng),
            "relu2": ReLU(),
            "fc3": Dense(h2, 1, rng=rng),
        }
        # Zero final layer: an untrained model scores sigmoid(0) = 0.5 for
        # every pair, and gradient still reaches the hidden layers.
        self.scorer["fc3"].weight[:] = 0.0

    # -- descriptors --

    def pooled(self, pixels: np.ndarray) -> np.ndarray:
        """Patch pixels (any size, float in [0,1]) to a 55-row descriptor."""
        size = self.encoder.config.input_size
        arr = np.asarray(pixels, dtype=np.float64)
        if arr.shape[:2] != (size, size):
            arr = bilinear_resize(arr, size, size)
        fmap = self.encoder.feature_map(arr)
        return pool_windows(fmap, self.windows, self.reduction,
                            self.config.gem_power)

    def pooled_many(self, patches: list[np.ndarray]) -> list[np.ndarray]:
        return [self.pooled(p) for p in patches]

    # -- scoring --

    def _scorer_forward(self, x: np.ndarray) -> np.ndarray:
        h = self.scorer["relu1"].forward(self.scorer["fc1"].forward(x))
        h = self.scorer["relu2"].forward(self.scorer["fc2"].forward(h))
        return self.scorer["fc3"].forward(h)[:, 0]

    def _scorer_backward(self, grad_out: np.ndarray) -> None:
        g = self.scorer["fc3"].backward(grad_out[:, None])
        g = self.scorer["fc2"].backward(self.scorer["relu2"].backward(g))
        self.scorer["fc1"].backward(self.scorer["relu1"].backward(g))

    @staticmethod
    def _canonical(f_a: np.ndarray, f_b: np.ndarray):
        a = np.ascontiguousarray(f_a, dtype=np.float64)
        b = np.ascontiguousarray(f_b, dtype=np.float64)
        return (a, b) if a.tobytes() <= b.tobytes() else (b, a)

    def score_pooled(self, f_q: np.ndarray, f_i: np.ndarray) -> float:
        return float(self.score_pooled_many(f_q, [f_i])[0])

    def score_pooled_many(self, f_q: np.ndarray,
                          candidates: list[np.ndarray]) -> np.ndarray:
        """Scores of one query descriptor against many candidates.

        Each pair is ordered canonically by raw bytes before the math, so
        swapping query and candidate reproduces the identical float.
        """
        if not candidates:
            return np.zeros(0)
        flat = len(self.windows) ** 2
        x = np.empty((2 * len(candidates), flat))
        for k, f_i in enumerate(candidates):
            a, b = self._canonical(f_q, f_i)
            c = correlate(a, b)
            x[2 * k] = c.reshape(-1)
            x[2 * k + 1] = c.T.reshape(-1)
        y = self._scorer_forward(x)
        return _sigmoid(y[0::2] + y[1::2])

    def score(self, pixels_q: np.ndarray, pixels_i: np.ndarray) -> float:
        """Symmetric match probability for two patches."""
        return self.score_pooled(self.pooled(pixels_q), self.pooled(pixels_i))

    # -- persistence --

    def trained_params(self) -> dict[str, np.ndarray]:
        out = {"reduction": self.reduction}
        out.update(collect_params(self.scorer))
        return out

    def parameter_digest(self) -> str:
        params = dict(self.trained_params())
        params.update({f"encoder.{k}": v for k, v in self.encoder.params().items()})
        return parameter_digest(params)

    def save(self, path) -> None:
        cfg = asdict(self.config)
        cfg["hidden"] = list(self.config.hidden)
        enc_cfg = asdict(self.encoder.config)
        enc_cfg["channels"] = list(self.encoder.config.channels)
        params = dict(self.trained_params())
        params.update({f"encoder.{k}": v for k, v in self.encoder.params().items()})
        storage.save_checkpoint(path, self.KIND, {"verifier": cfg, "encoder": enc_cfg},
                                params, self.parameter_digest())

    @classmethod
    def load(cls, path) -> "VerifierModel":
        kind, cfg, params, digest = storage.load_checkpoint(path)
        if kind != cls.KIND:
            raise storage.FormatError(f"checkpoint holds {kind!r}, not a verifier")
        enc_cfg = cfg["encoder"]
        enc_cfg["channels"] = tuple(enc_cfg["channels"])
        encoder = PatchEncoder(EncoderConfig(**enc_cfg))
        enc_params = encoder.params()
        for name, value in params.items():
            if name.startswith("encoder."):
                enc_params[name[len("encoder."):]][...] = value
        ver_cfg = cfg["verifier"]
        ver_cfg["hidden"] = tuple(ver_cfg["hidden"])
        model = cls(encoder, VerifierConfig(**ver_cfg))
        model.reduction[...] = params["reduction"]
        own = collect_params(model.scorer)
        for name, value in params.items():
            if name in own:
                own[name][...] = value
        if model.parameter_digest() != digest:
            raise storage.FormatError("checkpoint digest mismatch")
        return model


# ---------------------------------------------------------------------------
# Training loss (exposed for gradient checking)
# ---------------------------------------------------------------------------

def scorer_loss_and_grads(model: VerifierModel,
                          pairs: list[tuple[np.ndarray, np.ndarray]],
                          labels: np.ndarray, weights: np.ndarray):
    """Weighted binary cross-entropy over pair scores, with scorer grads.

    Returns (loss, grads dict, logits). Pairs enter in the given order;
    canonicalization is an inference-time concern, the loss is symmetric
    either way.
    """
    flat = len(model.windows) ** 2
    x = np.empty((2 * len(pairs), flat))
    for k, (f_a, f_b) in enumerate(pairs):
        c = correlate(f_a, f_b)
        x[2 * k] = c.reshape(-1)
        x[2 * k + 1] = c.T.reshape(-1)
    y = model._scorer_forward(x)
    z = y[0::2] + y[1::2]

    t = np.asarray(labels, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    # stable softplus(z) - t*z
    per = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - t * z
    loss = float((w * per).sum() / total)

    dz = w * (_sigmoid(z) - t) / total
    model._scorer_backward(np.repeat(dz, 2))
    return loss, collect_grads(model.scorer), z


# ---------------------------------------------------------------------------
# Hard-negative queue
# ---------------------------------------------------------------------------

class NegativeQueue:
    """FIFO ring of (recordId, pooled summary) with capacity N.

    Mining returns the records whose summaries are most cosine-similar to
    the probe, excluding a given record id and deduplicating repeats.
    """

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self._summaries = np.zeros((capacity, dim))
        self._ids: list = [None] * capacity
        self._head = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def push(self, record_id, summary: np.ndarray) -> None:
        self._summaries[self._head] = summary
        self._ids[self._head] = record_id
        self._head = (self._head + 1) % self.capacity
        self._count = min(self._count + 1, self.capacity)

    def entries(self) -> list:
        """Record ids oldest-first, for inspection."""
        if self._count < self.capacity:
            return self._ids[:self._count]
        return self._ids[self._head:] + self._ids[:self._head]

    def hardest(self, summary: np.ndarray, k: int, exclude=None) -> list:
        """Top-k record ids by cosine similarity of summaries."""
        if self._count == 0:
            return []
        sims = self._summaries[:self._count] @ np.asarray(summary, dtype=np.float64)
        out = []
        seen = set()
        for idx in np.argsort(-sims, kind="stable"):
            rid = self._ids[idx]
            if rid == exclude or rid in seen:
                continue
            seen.add(rid)
            out.append(rid)
            if len(out) == k:
                break
        return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _resize_to(arr: np.ndarray, size: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[:2] != (size, size):
        arr = bilinear_resize(arr, size, size)
    return arr


def _mixture_view(a: np.ndarray, others: list, rng) -> np.ndarray:
    """Patchwork view of a: one half, or two random quadrants, replaced.

    With a single donor a random half is swapped in; with more donors each
    replaces one quadrant. Mimics composite queries whose tiles straddle
    several images and must not verify against any of them.
    """
    mix = a.copy()
    h = a.shape[0] // 2
    w = a.shape[1] // 2
    if len(others) == 1:
        b = others[0]
        cut = int(rng.integers(4))
        if cut == 0:
            mix[:h] = b[:h]
        elif cut == 1:
            mix[h:] = b[h:]
        elif cut == 2:
            mix[:, :w] = b[:, :w]
        else:
            mix[:, w:] = b[:, w:]
        return mix
    quads = [(slice(None, h), slice(None, w)), (slice(None, h), slice(w, None)),
             (slice(h, None), slice(None, w)), (slice(h, None), slice(w, None))]
    picks = rng.choice(4, size=len(others), replace=False)
    for b, q in zip(others, picks):
        mix[quads[q]] = b[quads[q]]
    return mix


def _grid_view(sources: list, rng, grid: int = 4) -> np.ndarray:
    """Sixteen-cell patchwork, each cell copied from one source's own
    cell rect. Shaped like the coarsest tile of a composite query."""
    out = sources[0].copy()
    side = out.shape[0]
    for iy in range(grid):
        for ix in range(grid):
            src = sources[int(rng.integers(len(sources)))]
            y0, y1 = iy * side // grid, (iy + 1) * side // grid
            x0, x1 = ix * side // grid, (ix + 1) * side // grid
            out[y0:y1, x0:x1] = src[y0:y1, x0:x1]
    return out


def train_verifier(images: dict[str, np.ndarray], encoder: PatchEncoder,
                   config: VerifierConfig | None = None
                   ) -> tuple[VerifierModel, VerifierReport]:
    """Fit the pair scorer on augmentation positives and mined negatives.

    The backbone encoder stays frozen. Positives pair an image's clean
    descriptor with a strongly augmented view of the same image, plus one
    small-crop pair per anchor (an augmented tile against the clean tile)
    so matching survives at patch scale. Negatives pair the augmented view
    with the most confusable other images found in a FIFO queue of recent
    descriptors, and four extra families tighten the decision boundary:
    the anchor tile against its most confusable tiles from other images
    (what actually floods retrieval shortlists), patchwork mixtures scored
    against their own constituents (a view sharing only part of its
    content is not a match), sixteen-cell grids scored the same way, and a
    few uniformly random non-matches for calibration. Binary
    cross-entropy, positives up-weighted to balance the many-to-1
    negative ratio.
    """
    config = config or VerifierConfig()
    ids = sorted(images)
    if len(ids) < 12:
        raise CorpusTooSmall(f"need at least 12 images, got {len(ids)}")
    rng = np.random.default_rng(config.seed)
    order = list(ids)
    rng.shuffle(order)
    n_val = max(2, int(len(order) * config.val_fraction))
    val_ids, train_ids = order[:n_val], order[n_val:]

    model = VerifierModel(encoder, config)
    size = encoder.config.input_size

    # Clean descriptors once; the encoder and reduction never change.
    clean = {i: model.pooled(_resize_to(images[i], size)) for i in ids}

    # Clean tile descriptors of the training split, one per sub-image
    # slot. Patch-scale pairs are scored against these, and the summary
    # matrix mines the tiles most confusable with an anchor tile.
    tile_keys, tile_rows = [], []
    clean_tiles = {}
    for image_id in train_ids:
        full = images[image_id].shape[0]
        for slot in range(1, 21):
            y0, x0, y1, x1 = slot_rect(slot, full, full)
            desc = model.pooled(np.asarray(images[image_id][y0:y1, x0:x1],
                                           dtype=np.float64))
            clean_tiles[(image_id, slot)] = desc
            tile_keys.append((image_id, slot))
            tile_rows.append(desc[0])
    tile_summaries = np.stack(tile_rows) if tile_rows else np.zeros((0, 1))

    queue = NegativeQueue(config.queue_size, config.reduced_dim)
    optimizer = Adam(collect_params(model.scorer), lr=config.lr)
    report = VerifierReport()

    for epoch in range(config.epochs):
        epoch_order = list(train_ids)
        rng.shuffle(epoch_order)
        for start in range(0, len(epoch_order), config.batch_size):
            batch = epoch_order[start:start + config.batch_size]
            pairs, labels, weights = [], [], []
            for image_id in batch:
                severity = float(rng.uniform(config.min_severity,
                                             config.max_severity))
                view = augment(images[image_id], severity,
                               seed=int(rng.integers(2 ** 31)))
                f_view = model.pooled(_resize_to(view, size))
                anchor_pairs = [(f_view, clean[image_id])]
                anchor_labels = [1.0]
                for _ in range(config.patch_positives):
                    # composite queries carry small native-resolution
                    # crops; matching must hold at patch scale too
                    slot = 1 + int(rng.integers(20))
                    full = images[image_id].shape[0]
                    y0, x0, y1, x1 = slot_rect(slot, full, full)
                    tile = np.asarray(images[image_id][y0:y1, x0:x1],
                                      dtype=np.float64)
                    f_tile = model.pooled(augment(
                        tile, severity, seed=int(rng.integers(2 ** 31))))
                    anchor_pairs.append((f_tile,
                                         clean_tiles[(image_id, slot)]))
                    anchor_labels.append(1.0)
                    # tiles of other images that look most like this one
                    # are exactly what floods retrieval shortlists
                    sims = tile_summaries @ f_tile[0]
                    found = 0
                    for row in np.argsort(-sims, kind="stable"):
                        other_key = tile_keys[row]
                        if other_key[0] == image_id:
                            continue
                        anchor_pairs.append((f_tile, clean_tiles[other_key]))
                        anchor_labels.append(0.0)
                        found += 1
                        if found == config.patch_hard_k:
                            break
                negatives = queue.hardest(f_view[0], config.hard_neg_k,
                                          exclude=image_id)
                for neg_id in negatives:
                    anchor_pairs.append((f_view, clean[neg_id]))
                    anchor_labels.append(0.0)
                for _ in range(config.easy_negatives):
                    other = train_ids[int(rng.integers(len(train_ids)))]
                    if other == image_id:
                        continue
                    anchor_pairs.append((f_view, clean[other]))
                    anchor_labels.append(0.0)
                for _ in range(config.mixture_negatives):
                    n_donors = 1 + int(rng.integers(3))
                    draw = [train_ids[int(rng.integers(len(train_ids)))]
                            for _ in range(n_donors + 1)]
                    donors = [d for d in draw[:n_donors] if d != image_id]
                    bystander = draw[n_donors]
                    if not donors:
                        continue
                    mix = _mixture_view(
                        _resize_to(images[image_id], size),
                        [_resize_to(images[d], size) for d in donors], rng)
                    f_mix = model.pooled(mix)
                    # a patchwork matches neither its constituents (each
                    # covers at most half of it) nor uninvolved images
                    for against in [image_id] + donors + [bystander]:
                        anchor_pairs.append((f_mix, clean[against]))
                        anchor_labels.append(0.0)
                for _ in range(config.grid_negatives):
                    draw = [train_ids[int(rng.integers(len(train_ids)))]
                            for _ in range(5)]
                    others = [d for d in draw[:4] if d != image_id]
                    if not others:
                        continue
                    sources = [_resize_to(images[i], size)
                               for i in [image_id] + others]
                    f_grid = model.pooled(_grid_view(sources, rng))
                    # sixteen cells spread every participant too thin
                    # for any of them to count as a match
                    for against in (image_id, others[0], draw[4]):
                        anchor_pairs.append((f_grid, clean[against]))
                        anchor_labels.append(0.0)
                n_pos = sum(1 for t in anchor_labels if t == 1.0)
                n_neg = len(anchor_labels) - n_pos
                w_pos = float(max(n_neg, 1)) / float(max(n_pos, 1))
                pairs.extend(anchor_pairs)
                labels.extend(anchor_labels)
                weights.extend([w_pos if t == 1.0 else 1.0
                                for t in anchor_labels])
            for image_id in batch:
                queue.push(image_id, clean[image_id][0])

            loss, grads, _ = scorer_loss_and_grads(
                model, pairs, np.array(labels), np.array(weights))
            if not np.isfinite(loss):
                raise DivergedTraining(f"loss {loss} at step {report.steps}")
            optimizer.step(grads)
            report.losses.append(loss)
            report.steps += 1

    # Held-out check: each validation image scored against its own clean
    # descriptor (positive) and its most confusable val neighbors (negative).
    val_rng = np.random.default_rng(config.seed + 1)
    pos_scores, neg_scores = [], []
    val_clean = {i: clean[i] for i in val_ids}
    for image_id in val_ids:
        severity = float(val_rng.uniform(config.min_severity,
                                         config.max_severity))
        view = augment(images[image_id], severity,
                       seed=int(val_rng.integers(2 ** 31)))
        f_view = model.pooled(_resize_to(view, size))
        pos_scores.append(model.score_pooled(f_view, clean[image_id]))
        others = [j for j in val_ids if j != image_id]
        sims = {j: float(f_view[0] @ val_clean[j][0]) for j in others}
        ranked = sorted(others, key=lambda j: -sims[j])
        picks = ranked[:1] + list(val_rng.choice(others, size=min(2, len(others)),
                                                 replace=False))
        for j in picks:
            neg_scores.append(model.score_pooled(f_view, clean[j]))

    report.val_auc = auc_from_scores(np.array(pos_scores), np.array(neg_scores))
    report.median_positive = float(np.median(pos_scores))
    report.median_negative = float(np.median(neg_scores))
    if report.val_auc < config.auc_floor:
        raise DivergedTraining(
            f"held-out AUC {report.val_auc:.3f} below floor {config.auc_floor}")
    return model, report


def auc_from_scores(positives: np.ndarray, negatives: np.ndarray) -> float:
    """Rank-based AUC (Mann-Whitney), midranks for ties."""
    scores = np.concatenate([positives, negatives])
    ranks = rankdata(scores)
    n_pos, n_neg = len(positives), len(negatives)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
