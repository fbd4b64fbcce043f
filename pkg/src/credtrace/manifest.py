"""Provenance manifests: signed records of how an asset came to be.

A manifest carries assertions (facts about the asset), ingredient links to
the manifests of assets it was made from, a content hash of the asset
payload, and a detached signature. Manifests form a graph rooted at the
current asset and fanning out to its ingredients; a generated image points
at its generator model, and the model points at its training images.

Manifests are stored as sidecar files (``<asset>.manifest.json``) in
canonical JSON, and collected into a store keyed by GUID. An asset-reference
assertion may carry a token URI (``c2pa-nft://...``) that bridges the
manifest to a ledger token, from which the current owner's wallet can be
resolved.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .canonical import canonical_json_bytes, is_hex, sha256_hex
from .keys import SigningKey, verify_signature

MANIFEST_VERSION = 1
GUID_HEX_CHARS = 32
ZERO_SIGNATURE = "0" * 128

ASSERTION_KINDS = ("CreatorInfo", "AssetReference", "TrainingData", "GeneratedBy", "Custom")
INGREDIENT_ROLES = ("TrainingImage", "GenModel", "Archive", "Other")

ARA_SCHEME = "c2pa-nft"
MAX_CONTRACT_BITS = 160

_ARA_RE = re.compile(
    r"^c2pa-nft://(?P<ns>[A-Za-z0-9_-]+):(?P<chain>[A-Za-z0-9_-]+)"
    r":(?P<contract>0x[0-9a-fA-F]+)/(?P<nft>0x[0-9a-fA-F]+|[0-9]+)$"
)


class ManifestError(Exception):
    """Base class for manifest failures."""


class DanglingIngredient(ManifestError):
    def __init__(self, guid: str):
        super().__init__(f"ingredient manifest {guid} not found in store")
        self.guid = guid


class SigningFailure(ManifestError):
    pass


class MalformedUri(ManifestError):
    def __init__(self, reason: str):
        super().__init__(f"malformed asset-reference URI: {reason}")
        self.reason = reason


class CycleDetected(ManifestError):
    def __init__(self, path: Sequence[str]):
        super().__init__("ingredient cycle: " + " -> ".join(path))
        self.path = list(path)


class StoreCollision(ManifestError):
    pass


class UnknownManifest(ManifestError):
    pass


class NoPaymentRoute(ManifestError):
    pass


class AraResolutionFailure(ManifestError):
    pass


# ---------------------------------------------------------------------------
# Asset-reference URIs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AraUri:
    """Pointer from a manifest to a ledger token.

    Textual form: ``c2pa-nft://<namespace>:<chain>:<contract>/<nftId>``
    with the contract address and token id in minimal lowercase hex.
    """

    dlt_namespace: str
    chain_id: str
    contract_address: int
    nft_id: int

    def __post_init__(self):
        if not self.dlt_namespace or not self.chain_id:
            raise MalformedUri("namespace and chain id must be non-empty")
        if not (0 <= self.contract_address < (1 << MAX_CONTRACT_BITS)):
            raise MalformedUri("contract address out of 160-bit range")
        if self.nft_id < 0:
            raise MalformedUri("nft id must be unsigned")


def format_ara_uri(uri: AraUri) -> str:
    return (
        f"{ARA_SCHEME}://{uri.dlt_namespace}:{uri.chain_id}"
        f":{uri.contract_address:#x}/{uri.nft_id:#x}"
    )


def parse_ara_uri(text: str) -> AraUri:
    """Parse the textual token URI form; rejects anything off-grammar."""
    match = _ARA_RE.match(text)
    if match is None:
        raise MalformedUri(repr(text))
    contract = int(match.group("contract"), 16)
    nft_text = match.group("nft")
    nft_id = int(nft_text, 16) if nft_text.startswith("0x") else int(nft_text)
    if contract >= (1 << MAX_CONTRACT_BITS):
        raise MalformedUri("contract address exceeds 160 bits")
    return AraUri(match.group("ns"), match.group("chain"), contract, nft_id)


def ara_from_wallet_style(contract_address: str, nft_id: int,
                          namespace: str = "eip155", chain_id: str = "1") -> AraUri:
    """Build an AraUri from a 0x-prefixed contract address string."""
    return AraUri(namespace, chain_id, int(contract_address, 16), nft_id)


# ---------------------------------------------------------------------------
# Manifest data model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Assertion:
    kind: str
    payload: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ASSERTION_KINDS:
            raise ManifestError(f"unknown assertion kind {self.kind!r}")
        for key, value in self.payload.items():
            if not isinstance(key, str) or not isinstance(value, (str, int, float)):
                raise ManifestError("assertion payload must map text keys to text/number values")
        object.__setattr__(self, "payload", dict(self.payload))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "payload": dict(self.payload)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Assertion":
        return cls(kind=data["kind"], payload=data["payload"])


@dataclass(frozen=True)
class IngredientRef:
    manifest_guid: str
    role: str

    def __post_init__(self):
        if not is_hex(self.manifest_guid, GUID_HEX_CHARS):
            raise ManifestError(f"bad ingredient guid {self.manifest_guid!r}")
        if self.role not in INGREDIENT_ROLES:
            raise ManifestError(f"unknown ingredient role {self.role!r}")

    def to_dict(self) -> dict:
        return {"manifestGuid": self.manifest_guid, "role": self.role}

    @classmethod
    def from_dict(cls, data: Mapping) -> "IngredientRef":
        return cls(manifest_guid=data["manifestGuid"], role=data["role"])


@dataclass(frozen=True)
class Manifest:
    guid: str
    creator_name: str
    creator_wallet: str | None
    assertions: tuple[Assertion, ...]
    ingredients: tuple[IngredientRef, ...]
    content_hash: str
    signer_public_key: str
    signature: str

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "guid": self.guid,
            "creatorName": self.creator_name,
            "creatorWallet": self.creator_wallet,
            "assertions": [a.to_dict() for a in self.assertions],
            "ingredients": [i.to_dict() for i in self.ingredients],
            "contentHash": self.content_hash,
            "signerPublicKey": self.signer_public_key,
            "signature": self.signature,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Manifest":
        version = data.get("version")
        if version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {version!r}")
        return cls(
            guid=data["guid"],
            creator_name=data["creatorName"],
            creator_wallet=data["creatorWallet"],
            assertions=tuple(Assertion.from_dict(a) for a in data["assertions"]),
            ingredients=tuple(IngredientRef.from_dict(i) for i in data["ingredients"]),
            content_hash=data["contentHash"],
            signer_public_key=data["signerPublicKey"],
            signature=data["signature"],
        )

    def serialize(self) -> bytes:
        return canonical_json_bytes(self.to_dict())

    def signed_bytes(self) -> bytes:
        """Canonical serialization with the signature field zeroed."""
        record = self.to_dict()
        record["signature"] = ZERO_SIGNATURE
        return canonical_json_bytes(record)

    def assertions_of_kind(self, kind: str) -> list[Assertion]:
        return [a for a in self.assertions if a.kind == kind]

    def asset_reference(self) -> AraUri | None:
        """The token URI carried by this manifest's AssetReference assertion, if any."""
        refs = self.assertions_of_kind("AssetReference")
        if not refs:
            return None
        return parse_ara_uri(str(refs[0].payload["uri"]))

    def declared_minter(self) -> str | None:
        for a in self.assertions_of_kind("Custom"):
            if a.payload.get("name") == "dlt-mint-declaration":
                return str(a.payload["minterWallet"])
        return None


def deserialize_manifest(data: bytes) -> Manifest:
    import json

    try:
        return Manifest.from_dict(json.loads(data.decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"cannot parse manifest: {exc}") from exc


# ---------------------------------------------------------------------------
# GUIDs
# ---------------------------------------------------------------------------

class GuidFactory:
    """Version-4 style random 128-bit GUIDs, optionally seeded.

    Seeded factories make entire pipeline runs byte-reproducible; unseeded
    ones draw from the OS entropy pool.
    """

    def __init__(self, seed: int | None = None):
        if seed is None:
            self._rng = None
        else:
            import random

            self._rng = random.Random(seed)

    def __call__(self) -> str:
        if self._rng is None:
            import secrets

            raw = bytearray(secrets.token_bytes(16))
        else:
            raw = bytearray(self._rng.getrandbits(8) for _ in range(16))
        raw[6] = (raw[6] & 0x0F) | 0x40  # version 4
        raw[8] = (raw[8] & 0x3F) | 0x80  # variant 10
        return bytes(raw).hex()


# ---------------------------------------------------------------------------
# Manifest store
# ---------------------------------------------------------------------------

class ManifestStore:
    """In-memory manifest collection keyed by GUID.

    Values are immutable once added; adds must be serialized externally,
    reads are safe from any number of threads.
    """

    def __init__(self):
        self._by_guid: dict[str, Manifest] = {}

    def add(self, manifest: Manifest) -> None:
        if manifest.guid in self._by_guid:
            raise StoreCollision(f"guid {manifest.guid} already present")
        self._by_guid[manifest.guid] = manifest

    def get(self, guid: str) -> Manifest:
        try:
            return self._by_guid[guid]
        except KeyError:
            raise UnknownManifest(guid) from None

    def __contains__(self, guid: str) -> bool:
        return guid in self._by_guid

    def __len__(self) -> int:
        return len(self._by_guid)

    def guids(self) -> list[str]:
        return sorted(self._by_guid)

    def _force_put(self, manifest: Manifest) -> None:
        # Test hook: inject a crafted manifest (e.g. a forged cycle) verbatim.
        self._by_guid[manifest.guid] = manifest


class DirectoryManifestStore(ManifestStore):
    """Manifest store persisted as ``<root>/<guid>.json`` files."""

    def __init__(self, root: str | Path):
        super().__init__()
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        for path in sorted(self.root.glob("*.json")):
            manifest = deserialize_manifest(path.read_bytes())
            self._by_guid[manifest.guid] = manifest

    def add(self, manifest: Manifest) -> None:
        super().add(manifest)
        path = self.root / f"{manifest.guid}.json"
        path.write_bytes(manifest.serialize())


def write_sidecar(manifest: Manifest, asset_path: str | Path) -> Path:
    """Write ``<asset>.manifest.json`` next to the asset file."""
    path = Path(str(asset_path) + ".manifest.json")
    path.write_bytes(manifest.serialize())
    return path


def read_sidecar(asset_path: str | Path) -> Manifest:
    path = Path(str(asset_path) + ".manifest.json")
    if not path.exists():
        raise UnknownManifest(f"no manifest sidecar at {path}")
    return deserialize_manifest(path.read_bytes())


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def build_manifest(
    asset: bytes,
    creator_name: str,
    signing_key: SigningKey,
    *,
    creator_wallet: str | None = None,
    assertions: Iterable[Assertion] = (),
    ingredients: Iterable[IngredientRef] = (),
    store: ManifestStore | None = None,
    guid_factory: GuidFactory | None = None,
) -> Manifest:
    """Build and sign a manifest for ``asset``.

    If a store is given, every ingredient GUID must already resolve there
    and the finished manifest is added to it.
    """
    ingredients = tuple(ingredients)
    if store is not None:
        for ref in ingredients:
            if ref.manifest_guid not in store:
                raise DanglingIngredient(ref.manifest_guid)
    factory = guid_factory or GuidFactory()
    unsigned = Manifest(
        guid=factory(),
        creator_name=creator_name,
        creator_wallet=creator_wallet,
        assertions=tuple(assertions),
        ingredients=ingredients,
        content_hash=sha256_hex(asset),
        signer_public_key=signing_key.public_key_hex,
        signature=ZERO_SIGNATURE,
    )
    try:
        signature = signing_key.sign(unsigned.signed_bytes())
    except Exception as exc:  # cryptography backend failure
        raise SigningFailure(str(exc)) from exc
    manifest = Manifest(**{**unsigned.__dict__, "signature": signature})
    if store is not None:
        store.add(manifest)
    return manifest


@dataclass
class VerificationResult:
    valid: bool
    failures: list[str]


def verify_manifest(
    manifest: Manifest,
    store: ManifestStore | None = None,
    asset: bytes | None = None,
) -> VerificationResult:
    """Check signature, content hash, and ingredient resolution.

    Failures are collected, not raised: a manifest with three problems
    reports all three. The content hash is only checkable when the asset
    payload bytes are supplied.
    """
    failures: list[str] = []
    if not verify_signature(manifest.signer_public_key, manifest.signed_bytes(), manifest.signature):
        failures.append("BadSignature")
    if asset is not None and sha256_hex(asset) != manifest.content_hash:
        failures.append("ContentHashMismatch")
    if store is not None:
        for ref in manifest.ingredients:
            if ref.manifest_guid not in store:
                failures.append(f"DanglingIngredient:{ref.manifest_guid}")
    for a in manifest.assertions_of_kind("AssetReference"):
        uris = [k for k in a.payload if k == "uri"]
        if len(uris) != 1:
            failures.append("AssetReferenceWithoutUri")
            continue
        try:
            parse_ara_uri(str(a.payload["uri"]))
        except MalformedUri:
            failures.append("MalformedAssetReference")
    return VerificationResult(valid=not failures, failures=failures)


@dataclass
class ProvenanceGraph:
    """Transitive ingredient closure of a root manifest.

    ``order`` lists manifests breadth-first from the root, siblings in GUID
    order; ``edges`` are (parent guid, child guid, role) triples.
    """

    root_guid: str
    order: list[Manifest]
    edges: list[tuple[str, str, str]]

    def guids(self) -> list[str]:
        return [m.guid for m in self.order]

    def by_role(self, role: str) -> list[Manifest]:
        wanted = {child for _, child, r in self.edges if r == role}
        return [m for m in self.order if m.guid in wanted]


def traverse_provenance(root: Manifest, store: ManifestStore) -> ProvenanceGraph:
    """Walk the ingredient graph under ``root``.

    Deterministic breadth-first order with GUID-sorted siblings. Diamonds
    (two paths to the same manifest) are fine; a true cycle raises
    CycleDetected with one offending path, and a reference that does not
    resolve raises DanglingIngredient.
    """
    order: list[Manifest] = []
    edges: list[tuple[str, str, str]] = []
    seen: set[str] = set()
    queue: list[Manifest] = [root]
    seen.add(root.guid)
    while queue:
        current = queue.pop(0)
        order.append(current)
        children = sorted(current.ingredients, key=lambda r: r.manifest_guid)
        for ref in children:
            edges.append((current.guid, ref.manifest_guid, ref.role))
            if ref.manifest_guid not in store:
                raise DanglingIngredient(ref.manifest_guid)
            if ref.manifest_guid not in seen:
                seen.add(ref.manifest_guid)
                queue.append(store.get(ref.manifest_guid))

    _check_acyclic(root, store)
    return ProvenanceGraph(root_guid=root.guid, order=order, edges=edges)


def _check_acyclic(root: Manifest, store: ManifestStore) -> None:
    # Iterative DFS with white/grey/black coloring; grey hit = back edge.
    WHITE, GREY, BLACK = 0, 1, 2
    color: dict[str, int] = {}
    stack: list[tuple[str, Iterator[str]]] = []
    path: list[str] = []

    def children_of(guid: str) -> Iterator[str]:
        m = store.get(guid)
        return iter(sorted(ref.manifest_guid for ref in m.ingredients))

    color[root.guid] = GREY
    stack.append((root.guid, children_of(root.guid)))
    path.append(root.guid)
    while stack:
        guid, it = stack[-1]
        advanced = False
        for child in it:
            state = color.get(child, WHITE)
            if state == GREY:
                raise CycleDetected(path + [child])
            if state == WHITE:
                color[child] = GREY
                stack.append((child, children_of(child)))
                path.append(child)
                advanced = True
                break
        if not advanced:
            color[guid] = BLACK
            stack.pop()
            path.pop()


def extract_wallet_route(manifest: Manifest, ledger=None) -> str:
    """Resolve the wallet that payments for this asset should go to.

    A token reference, when present, wins: the token's owning rights
    contract knows the creator's current wallet. Otherwise the wallet
    asserted at creation time is used.
    """
    ara = manifest.asset_reference()
    if ara is not None:
        if ledger is None:
            raise AraResolutionFailure("manifest carries a token reference but no ledger was given")
        try:
            return ledger.resolve_ara_creator_wallet(ara)
        except AraResolutionFailure:
            raise
        except Exception as exc:
            raise AraResolutionFailure(str(exc)) from exc
    if manifest.creator_wallet:
        return manifest.creator_wallet
    raise NoPaymentRoute(f"manifest {manifest.guid} has neither wallet nor token reference")
