"""Provenance, attribution, and royalty tooling for generative image pipelines.

The package splits into three layers. The protocol layer (`manifest`,
`ledger`, `keys`) provides signed provenance manifests, token URIs, and a
deterministic ledger with rights contracts and escrow. The perception layer
(`patches`, `encoder`, `vectorindex`, `verifier`) fingerprints image regions,
searches them at scale, and re-scores candidate matches. The settlement layer
(`apportion`) turns match scores into per-source credit and royalty weights
that the ledger can pay out.
"""

__version__ = "0.1.0"

from .canonical import canonical_json_bytes, sha256_hex
from .keys import SigningKey, derive_signing_key, verify_signature, wallet_from_public_key
from .manifest import (
    Assertion,
    AraUri,
    CycleDetected,
    DirectoryManifestStore,
    GuidFactory,
    IngredientRef,
    Manifest,
    ManifestStore,
    build_manifest,
    extract_wallet_route,
    format_ara_uri,
    parse_ara_uri,
    traverse_provenance,
    verify_manifest,
)
from .ledger import Ledger, Receipt, TxRejected

__all__ = [
    "Assertion",
    "AraUri",
    "CycleDetected",
    "DirectoryManifestStore",
    "GuidFactory",
    "IngredientRef",
    "Ledger",
    "Manifest",
    "ManifestStore",
    "Receipt",
    "SigningKey",
    "TxRejected",
    "build_manifest",
    "canonical_json_bytes",
    "derive_signing_key",
    "extract_wallet_route",
    "format_ara_uri",
    "parse_ara_uri",
    "sha256_hex",
    "traverse_provenance",
    "verify_manifest",
    "verify_signature",
    "wallet_from_public_key",
]
