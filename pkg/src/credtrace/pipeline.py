"""End-to-end orchestration shared by the command-line tool and the demos.

Glues the pieces together: corpus generation and ORA minting, patch index
and descriptor cache construction, composite-query attribution, provenance
walks, and royalty settlement with conservation accounting.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .apportion import AttributionConfig, CreditReport, attribute_image, settle_royalties
from .config import Config
from .corpus import compose_query_set, make_corpus, write_corpus, write_query
from .encoder import PatchEncoder, train_encoder
from .keys import SigningKey, derive_signing_key
from .ledger import Ledger
from .manifest import (
    GuidFactory,
    IngredientRef,
    Manifest,
    ManifestStore,
    build_manifest,
    extract_wallet_route,
    traverse_provenance,
)
from . import storage
from .patches import patchify, resample_patch
from .vectorindex import IvfPqIndex, build_index, load_index, save_index
from .verifier import VerifierModel, train_verifier

BASE_ROYALTY = 1000


# ---------------------------------------------------------------------------
# Corpus ORA minting
# ---------------------------------------------------------------------------

def creator_identity(identity_seed: str, image_id: str) -> tuple[str, SigningKey]:
    name = f"creator-{image_id}"
    return name, derive_signing_key(identity_seed.encode(), name)


def mint_corpus(images: dict, ledger: Ledger, store: ManifestStore, *,
                identity_seed: str, payer_wallet: str | None = None,
                right_kind: str = "GenerateImage",
                base_royalty: int = BASE_ROYALTY,
                guid_seed: int = 0) -> dict:
    """ORA-mint every corpus image under its own derived creator identity.

    One shared NFT contract holds the tokens; each creator operates a
    personal rights contract. When a payer wallet is given, each creator
    also issues it a right so later settlements can route payments.
    Returns a registry: imageId -> mint record plus creator name/wallet.
    """
    registrar = derive_signing_key(identity_seed.encode(), "registrar")
    nft_contract = ledger.create_nft_contract(registrar, "corpus-assets")
    factory = GuidFactory(seed=guid_seed)
    registry = {}
    for image_id in sorted(images):
        name, key = creator_identity(identity_seed, image_id)
        rights = ledger.create_rights_contract(key, f"rights-{image_id}")
        minted = ledger.mint_ora_asset(
            _image_bytes(images[image_id]), key, rights, nft_contract, store,
            creator_name=name, guid_factory=factory)
        if payer_wallet is not None:
            ledger.issue_right(key, rights, payer_wallet, right_kind,
                               nft_contract, minted["nftId"],
                               base_royalty=base_royalty)
        registry[image_id] = {**minted, "creatorName": name,
                              "creatorWallet": key.wallet}
    return registry


def _image_bytes(pixels: np.ndarray) -> bytes:
    # Content identity of an in-memory image: raw float32 pixels.
    return np.ascontiguousarray(pixels, dtype=np.float32).tobytes()


def fund_payer(ledger: Ledger, payer: SigningKey, registry: dict,
               per_asset: int) -> None:
    """Faucet the payer and spread escrow across every rights contract."""
    ledger.faucet(payer.wallet, per_asset * max(len(registry), 1))
    for image_id in sorted(registry):
        ledger.deposit_escrow(payer, registry[image_id]["rightsContract"],
                              per_asset)


# ---------------------------------------------------------------------------
# Index and descriptor cache
# ---------------------------------------------------------------------------

def corpus_patch_vectors(images: dict, encoder: PatchEncoder
                         ) -> tuple[list, np.ndarray]:
    """Fingerprint every patch of every image, keys ordered by (id, slot)."""
    keys = []
    stacks = []
    size = encoder.config.input_size
    for image_id in sorted(images):
        patches = patchify(images[image_id], image_id)
        batch = np.stack([resample_patch(p, size) for p in patches])
        stacks.append(encoder.embed(batch))
        keys.extend((image_id, p.slot) for p in patches)
    return keys, np.concatenate(stacks, axis=0)


def build_corpus_index(images: dict, encoder: PatchEncoder, params,
                       seed: int = 0) -> IvfPqIndex:
    keys, vectors = corpus_patch_vectors(images, encoder)
    return build_index(vectors, keys, params, seed=seed)


def export_patch_vectors(images: dict, encoder: PatchEncoder,
                         path: str | Path) -> int:
    """Dump every patch fingerprint to an embedding file; returns row count."""
    keys, vectors = corpus_patch_vectors(images, encoder)
    rows = ((image_id, slot, vec)
            for (image_id, slot), vec in zip(keys, vectors))
    return storage.write_embeddings(path, rows, dim=vectors.shape[1])


def index_from_embeddings(path: str | Path, params,
                          seed: int = 0) -> IvfPqIndex:
    """Build the patch index from precomputed fingerprints instead of
    running an encoder. Lets an externally trained model feed the same
    retrieval pipeline, as long as it wrote the embedding file format."""
    keys, vectors = storage.read_embedding_table(path)
    if not keys:
        raise storage.FormatError(f"embedding file {path} holds no rows")
    return build_index(vectors, keys, params, seed=seed)


def build_descriptor_cache(images: dict, verifier: VerifierModel) -> dict:
    """Pooled window descriptors for every (imageId, slot)."""
    size = verifier.encoder.config.input_size
    cache = {}
    for image_id in sorted(images):
        for patch in patchify(images[image_id], image_id):
            cache[(image_id, patch.slot)] = verifier.pooled(
                resample_patch(patch, size))
    return cache


def save_descriptors(cache: dict, path: str | Path) -> None:
    keys = sorted(cache)
    np.savez(path,
             keys=np.array([f"{i}|{s}" for i, s in keys]),
             values=np.stack([cache[k] for k in keys]))


def load_descriptors(path: str | Path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        keys, values = data["keys"], data["values"]
    cache = {}
    for label, rows in zip(keys, values):
        image_id, slot = str(label).rsplit("|", 1)
        cache[(image_id, int(slot))] = rows
    return cache


# ---------------------------------------------------------------------------
# Provenance of generated assets
# ---------------------------------------------------------------------------

def mint_model_manifest(store: ManifestStore, registry: dict,
                        model_bytes: bytes, service: SigningKey,
                        guid_factory: GuidFactory | None = None) -> Manifest:
    """Manifest for the trained model, ingredients = all training images."""
    ingredients = [IngredientRef(registry[i]["manifest"].guid, "TrainingImage")
                   for i in sorted(registry)]
    return build_manifest(model_bytes, "attribution-service", service,
                          creator_wallet=service.wallet,
                          ingredients=ingredients, store=store,
                          guid_factory=guid_factory)


def mint_generated_manifest(store: ManifestStore, model_manifest: Manifest,
                            pixels: np.ndarray, service: SigningKey,
                            guid_factory: GuidFactory | None = None) -> Manifest:
    """Manifest for one generated image, ingredient = the model."""
    return build_manifest(_image_bytes(pixels), "attribution-service", service,
                          creator_wallet=service.wallet,
                          ingredients=[IngredientRef(model_manifest.guid,
                                                     "GenModel")],
                          store=store, guid_factory=guid_factory)


def trace_training_creators(generated: Manifest, store: ManifestStore,
                            ledger: Ledger) -> list[dict]:
    """Creator name and payment wallet of every training image reachable
    from a generated asset's manifest, via model ingredients only."""
    graph = traverse_provenance(generated, store)
    out = []
    for m in graph.by_role("TrainingImage"):
        out.append({"guid": m.guid, "creatorName": m.creator_name,
                    "wallet": extract_wallet_route(m, ledger)})
    return out


# ---------------------------------------------------------------------------
# Full demo
# ---------------------------------------------------------------------------

@dataclass
class DemoResult:
    corpus_size: int
    minted: int
    queries: list = field(default_factory=list)   # per-query summaries
    conservation_ok: bool = False
    circulating_before: int = 0
    circulating_after: int = 0
    total_paid: int = 0
    escrow_decrease: int = 0
    recall_at_5: float = 0.0
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "corpusSize": self.corpus_size,
            "minted": self.minted,
            "queries": self.queries,
            "conservationOk": self.conservation_ok,
            "circulatingBefore": self.circulating_before,
            "circulatingAfter": self.circulating_after,
            "totalPaid": self.total_paid,
            "escrowDecrease": self.escrow_decrease,
            "recallAt5": self.recall_at_5,
            "wallSeconds": round(self.wall_seconds, 1),
        }


def _escrow_total(ledger: Ledger, wallet: str) -> int:
    return sum(c["escrow"].get(wallet, 0) for c in ledger.contracts.values()
               if c["kind"] == "rights")


def demo_mnist_scale(config: Config, n_queries: int = 10,
                     log=lambda line: None) -> DemoResult:
    """Toy-scale end-to-end run: mint, train, index, attribute, settle.

    Every step is seeded by the config, so two runs produce identical
    reports and ledger logs.
    """
    t0 = time.time()
    images = make_corpus(config.corpus_size, seed=config.corpus_seed,
                         size=config.image_size)
    log(f"corpus: {len(images)} synthetic images of {config.image_size}px")

    ledger = Ledger()
    store = ManifestStore()
    service = derive_signing_key(config.identity_seed.encode(), "service")
    registry = mint_corpus(images, ledger, store,
                           identity_seed=config.identity_seed,
                           payer_wallet=service.wallet)
    fund_payer(ledger, service, registry, per_asset=BASE_ROYALTY * n_queries)
    circulating_before = ledger.circulating()
    log(f"minted {len(registry)} ORA assets; escrow funded "
        f"({circulating_before} in circulation)")

    encoder, enc_report = train_encoder(images, config.encoder_config())
    log(f"encoder trained: margin={enc_report.val_margin:.3f}")
    verifier, ver_report = train_verifier(images, encoder,
                                          config.verifier_config())
    log(f"verifier trained: auc={ver_report.val_auc:.3f}")

    index = build_corpus_index(images, encoder, config.index_params(),
                               seed=config.index_seed)
    cache = build_descriptor_cache(images, verifier)
    log(f"index: {len(index)} patch fingerprints in {config.nlist} cells")

    model_blob = verifier.parameter_digest().encode()
    guids = GuidFactory(seed=config.corpus_seed + 1)
    model_manifest = mint_model_manifest(store, registry, model_blob,
                                         service, guid_factory=guids)
    log(f"model manifest {model_manifest.guid[:12]}… "
        f"ingredients={len(model_manifest.ingredients)}")

    attribution = AttributionConfig(top_k=config.top_k,
                                    lambda_threshold=config.lambda_threshold,
                                    top_m=config.top_m, nprobe=config.nprobe)
    queries = compose_query_set(images, n_queries=n_queries,
                                seed=config.query_seed)
    result = DemoResult(corpus_size=len(images), minted=len(registry),
                        circulating_before=circulating_before)
    recall_sum = 0.0
    for query in queries:
        generated = mint_generated_manifest(store, model_manifest,
                                            query.pixels, service,
                                            guid_factory=guids)
        creators = trace_training_creators(generated, store, ledger)
        report = attribute_image(query.pixels, query.query_id, index,
                                 encoder, verifier,
                                 lambda i, s: cache[(i, s)],
                                 attribution)
        manifests = {i: registry[i]["manifest"] for i in report.royalty_weights
                     if i in registry}
        escrow_before = _escrow_total(ledger, service.wallet)
        payouts = settle_royalties(report, manifests, ledger, service)
        escrow_after = _escrow_total(ledger, service.wallet)

        truth = set(query.sources)
        ranked = sorted(report.image_credits.items(),
                        key=lambda kv: (-kv[1], kv[0]))
        top5 = [i for i, _ in ranked[:5]]
        recall = len(truth & set(top5)) / len(truth)
        recall_sum += recall
        paid = sum(p.payout for p in payouts if p.ok)
        result.total_paid += paid
        result.escrow_decrease += escrow_before - escrow_after
        result.queries.append({
            "queryId": query.query_id,
            "generatedGuid": generated.guid,
            "trueSources": sorted(truth),
            "royaltyWeights": report.royalty_weights,
            "provenanceCreators": len(creators),
            "payouts": [{"imageId": p.image_id, "status": p.status,
                         "wallet": p.wallet, "payout": p.payout,
                         "weight": p.weight} for p in payouts],
            "paid": paid,
            "recallAt5": recall,
        })
        log(f"{query.query_id}: sources={len(truth)} recall@5={recall:.2f} "
            f"paid={paid}")

    result.circulating_after = ledger.circulating()
    result.conservation_ok = (
        result.circulating_after == result.circulating_before
        and result.escrow_decrease == result.total_paid)
    result.recall_at_5 = recall_sum / max(len(queries), 1)
    result.wall_seconds = time.time() - t0
    log(f"conservation: circulating {result.circulating_before} -> "
        f"{result.circulating_after}, escrow decrease "
        f"{result.escrow_decrease} == paid {result.total_paid}: "
        f"{'OK' if result.conservation_ok else 'VIOLATED'}")
    return result


# ---------------------------------------------------------------------------
# Artifact-level steps used by the command-line tool
# ---------------------------------------------------------------------------

def step_ingest(config: Config) -> list[Path]:
    images = make_corpus(config.corpus_size, seed=config.corpus_seed,
                         size=config.image_size)
    return write_corpus(images, config.corpus_dir)


def step_train_encoder(config: Config, images: dict):
    encoder, report = train_encoder(images, config.encoder_config())
    Path(config.encoder_checkpoint).parent.mkdir(parents=True, exist_ok=True)
    encoder.save(config.encoder_checkpoint)
    return encoder, report


def step_train_verifier(config: Config, images: dict):
    encoder = PatchEncoder.load(config.encoder_checkpoint)
    verifier, report = train_verifier(images, encoder, config.verifier_config())
    Path(config.verifier_checkpoint).parent.mkdir(parents=True, exist_ok=True)
    verifier.save(config.verifier_checkpoint)
    return verifier, report


def step_build_index(config: Config, images: dict,
                     embeddings_file: str | None = None,
                     export_embeddings: str | None = None) -> IvfPqIndex:
    if embeddings_file:
        index = index_from_embeddings(embeddings_file, config.index_params(),
                                      seed=config.index_seed)
    else:
        encoder = PatchEncoder.load(config.encoder_checkpoint)
        if export_embeddings:
            export_patch_vectors(images, encoder, export_embeddings)
        index = build_corpus_index(images, encoder, config.index_params(),
                                   seed=config.index_seed)
    Path(config.index_file).parent.mkdir(parents=True, exist_ok=True)
    save_index(index, config.index_file)
    verifier = VerifierModel.load(config.verifier_checkpoint)
    cache = build_descriptor_cache(images, verifier)
    save_descriptors(cache, config.descriptor_cache)
    return index


def step_attribute(config: Config, query_pixels: np.ndarray,
                   query_id: str) -> CreditReport:
    encoder = PatchEncoder.load(config.encoder_checkpoint)
    verifier = VerifierModel.load(config.verifier_checkpoint)
    index = load_index(config.index_file)
    cache = load_descriptors(config.descriptor_cache)
    attribution = AttributionConfig(top_k=config.top_k,
                                    lambda_threshold=config.lambda_threshold,
                                    top_m=config.top_m, nprobe=config.nprobe)
    return attribute_image(query_pixels, query_id, index, encoder, verifier,
                           lambda i, s: cache[(i, s)], attribution)


def step_compose_queries(config: Config, images: dict, n_queries: int,
                         severity: float) -> list[Path]:
    queries = compose_query_set(images, n_queries=n_queries,
                                seed=config.query_seed, severity=severity)
    paths = []
    for query in queries:
        image_path, _ = write_query(query, config.queries_dir)
        paths.append(image_path)
    return paths
