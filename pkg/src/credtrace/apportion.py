"""Credit apportionment and royalty settlement.

Verified matches turn into per-image weights: each retrieved patch of a
database image contributes max(score - lambda, 0) to that image's weight
for the query patch, and weights normalize into per-patch credit
fractions. Credits sum across the query's patches into an attribution
report whose top contributors carry the royalty weights applied at
settlement time.

Settlement walks each attributed image's manifest back to a wallet and
an exercisable right on the ledger and pays royaltyWeight * baseRoyalty
out of the payer's escrow. Every image settles independently: one broken
route does not block the others.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ledger import Ledger, SigningKey, TxRejected
from .manifest import AraResolutionFailure, Manifest, NoPaymentRoute, extract_wallet_route
from .patches import patchify, resample_patch
from .vectorindex import IvfPqIndex, RetrievalHit, search

REPORT_SCHEMA_VERSION = 1
DEFAULT_LAMBDA = 0.7
# Shortlist size per query patch. Keep this small: every retrieved patch
# that clears lambda takes a slice of the patch's normalized credit, so a
# wide shortlist dilutes exact matches with merely-similar candidates.
# Rank statistics on the composite fixture show the true source tile sits
# within the top 4 exact-reranked hits for >99% of cells even under
# augmentation, so nothing real is lost.
DEFAULT_TOP_K = 4
DEFAULT_TOP_M = 5


@dataclass
class AttributionConfig:
    top_k: int = DEFAULT_TOP_K
    lambda_threshold: float = DEFAULT_LAMBDA
    top_m: int = DEFAULT_TOP_M
    nprobe: int | None = None


@dataclass
class CreditReport:
    query_image_id: str
    per_patch_credits: dict = field(default_factory=dict)  # patch slot -> {imageId: fraction}
    image_credits: dict = field(default_factory=dict)      # imageId -> summed credit
    royalty_weights: dict = field(default_factory=dict)    # imageId -> fraction over top-M
    matched_patches: int = 0
    lambda_threshold: float = DEFAULT_LAMBDA
    top_k: int = DEFAULT_TOP_K
    top_m: int = DEFAULT_TOP_M

    def to_dict(self) -> dict:
        return {
            "schemaVersion": REPORT_SCHEMA_VERSION,
            "queryImageId": self.query_image_id,
            "perPatchCredits": {str(slot): dict(sorted(credits.items()))
                                for slot, credits in sorted(self.per_patch_credits.items())},
            "imageCredits": dict(sorted(self.image_credits.items())),
            "royaltyWeights": dict(sorted(self.royalty_weights.items())),
            "matchedPatches": self.matched_patches,
            "lambda": self.lambda_threshold,
            "topK": self.top_k,
            "topM": self.top_m,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CreditReport":
        if data.get("schemaVersion") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {data.get('schemaVersion')}")
        return cls(
            query_image_id=data["queryImageId"],
            per_patch_credits={int(k): dict(v)
                               for k, v in data["perPatchCredits"].items()},
            image_credits=dict(data["imageCredits"]),
            royalty_weights=dict(data["royaltyWeights"]),
            matched_patches=data["matchedPatches"],
            lambda_threshold=data["lambda"],
            top_k=data["topK"],
            top_m=data["topM"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CreditReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Weights and credit
# ---------------------------------------------------------------------------

def compute_weights(query_descriptors: dict, retrievals: dict, scorer,
                    descriptor_for, lam: float = DEFAULT_LAMBDA) -> dict:
    """Per-(image, query patch) match weights.

    query_descriptors: patch slot -> pooled descriptor of the query patch.
    retrievals: patch slot -> list of RetrievalHit for that patch.
    scorer: object with score_pooled_many(f_q, [f_i, ...]) -> array.
    descriptor_for: (imageId, slot) -> pooled descriptor of the hit patch.

    Weight w[(imageId, j)] = sum over that image's retrieved patches of
    max(score - lam, 0). Hits from any patch scale of the same image
    accumulate into one weight.
    """
    weights: dict = {}
    for j, hits in retrievals.items():
        if not hits:
            continue
        f_q = query_descriptors[j]
        candidates = [descriptor_for(h.image_id, h.slot) for h in hits]
        scores = scorer.score_pooled_many(f_q, candidates)
        for hit, score in zip(hits, scores):
            excess = max(float(score) - lam, 0.0)
            if excess > 0.0:
                key = (hit.image_id, j)
                weights[key] = weights.get(key, 0.0) + excess
    return weights


def credit_per_patch(weights_for_patch: dict) -> dict:
    """Normalize one patch's image weights into credit fractions.

    Empty or all-zero input gives an empty map: a patch that matched
    nothing assigns no credit rather than a uniform spread.
    """
    total = sum(weights_for_patch.values())
    if total <= 0.0:
        return {}
    return {image_id: w / total for image_id, w in weights_for_patch.items()}


def aggregate_credit(query_image_id: str, weights: dict,
                     config: AttributionConfig | None = None) -> CreditReport:
    """Fold (image, patch) weights into the final attribution report."""
    config = config or AttributionConfig()
    by_patch: dict = {}
    for (image_id, j), w in weights.items():
        by_patch.setdefault(j, {})[image_id] = w

    report = CreditReport(
        query_image_id=query_image_id,
        lambda_threshold=config.lambda_threshold,
        top_k=config.top_k,
        top_m=config.top_m,
    )
    for j in sorted(by_patch):
        credits = credit_per_patch(by_patch[j])
        if not credits:
            continue
        report.per_patch_credits[j] = credits
        report.matched_patches += 1
        for image_id, fraction in credits.items():
            report.image_credits[image_id] = (
                report.image_credits.get(image_id, 0.0) + fraction)

    # royalty weights: top-M images by credit, ties broken by id
    ranked = sorted(report.image_credits.items(), key=lambda kv: (-kv[1], kv[0]))
    top = ranked[:config.top_m]
    total = sum(c for _, c in top)
    if total > 0.0:
        report.royalty_weights = {image_id: c / total for image_id, c in top}
    return report


# ---------------------------------------------------------------------------
# Full attribution pipeline for one query image
# ---------------------------------------------------------------------------

def attribute_image(query_pixels: np.ndarray, query_image_id: str,
                    index: IvfPqIndex, encoder, verifier, descriptor_for,
                    config: AttributionConfig | None = None) -> CreditReport:
    """Patchify, retrieve per patch, verify the shortlists, apportion.

    descriptor_for(imageId, slot) resolves pooled descriptors of corpus
    patches; the caller supplies it from a precomputed cache.
    """
    config = config or AttributionConfig()
    size = encoder.config.input_size
    query_descriptors = {}
    retrievals = {}
    for patch in patchify(query_pixels, query_image_id):
        resampled = resample_patch(patch, size)
        fingerprint = encoder.embed(resampled)
        retrievals[patch.slot] = search(index, fingerprint, topk=config.top_k,
                                        nprobe=config.nprobe)
        query_descriptors[patch.slot] = verifier.pooled(resampled)
    weights = compute_weights(query_descriptors, retrievals, verifier,
                              descriptor_for, lam=config.lambda_threshold)
    return aggregate_credit(query_image_id, weights, config)


# ---------------------------------------------------------------------------
# Settlement
# ---------------------------------------------------------------------------

@dataclass
class PayoutRecord:
    image_id: str
    weight: float
    status: str               # "paid" | "failed"
    wallet: str | None = None
    payout: int | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "paid"


def settle_royalties(report: CreditReport, manifests: dict[str, Manifest],
                     ledger: Ledger, payer_key: SigningKey) -> list[PayoutRecord]:
    """Pay each attributed image's share out of the payer's escrow.

    For every image in the report's royalty weights: resolve its manifest
    to a wallet route, locate the payer's right on the asset, and
    exercise it with the image's weight. The ledger computes the payout
    as round(baseRoyalty * weight) and moves it escrow -> creator wallet.
    Failures are per-image; the rest still settle.
    """
    records = []
    for image_id, weight in sorted(report.royalty_weights.items()):
        manifest = manifests.get(image_id)
        if manifest is None:
            records.append(PayoutRecord(image_id, weight, "failed",
                                        error=f"no manifest for {image_id}"))
            continue
        try:
            wallet = extract_wallet_route(manifest, ledger)
            ara = manifest.asset_reference()
            located = ledger.find_right(ara, payer_key.wallet) if ara else None
            if located is None:
                raise NoPaymentRoute(
                    f"payer holds no right for {image_id} ({manifest.guid})")
            rights_contract, right_id = located
            event = ledger.exercise_right(payer_key, rights_contract, right_id,
                                          weight)
            records.append(PayoutRecord(image_id, weight, "paid", wallet=wallet,
                                        payout=int(event["payout"])))
        except (NoPaymentRoute, AraResolutionFailure, TxRejected) as exc:
            records.append(PayoutRecord(image_id, weight, "failed",
                                        error=str(exc)))
    return records
