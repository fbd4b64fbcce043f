"""Signing keys and wallet address derivation.

Manifests are signed with Ed25519. A key is configured as a 32-byte seed in
hex; the wallet address of a key holder is derived from the public key
(sha3-256, last 20 bytes, rendered as 0x-prefixed lowercase hex). Deriving
wallets from keys is what binds a manifest's creator wallet to the key that
signed it: nobody can claim another creator's wallet without their seed.
"""

from __future__ import annotations

import hashlib

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

WALLET_HEX_CHARS = 40


class SigningError(Exception):
    """Raised when a signing key cannot be loaded or used."""


class SigningKey:
    """Ed25519 signing key backed by a 32-byte seed."""

    def __init__(self, seed: bytes):
        if len(seed) != 32:
            raise SigningError(f"seed must be 32 bytes, got {len(seed)}")
        self._seed = seed
        self._key = Ed25519PrivateKey.from_private_bytes(seed)
        self._public = self._key.public_key().public_bytes_raw()

    @classmethod
    def from_hex(cls, seed_hex: str) -> "SigningKey":
        try:
            seed = bytes.fromhex(seed_hex)
        except ValueError as exc:
            raise SigningError(f"bad seed hex: {exc}") from exc
        return cls(seed)

    @property
    def seed_hex(self) -> str:
        return self._seed.hex()

    @property
    def public_key_hex(self) -> str:
        return self._public.hex()

    @property
    def wallet(self) -> str:
        return wallet_from_public_key(self.public_key_hex)

    def sign(self, message: bytes) -> str:
        """Sign ``message``, returning the 64-byte signature as hex."""
        return self._key.sign(message).hex()


def verify_signature(public_key_hex: str, message: bytes, signature_hex: str) -> bool:
    """True iff ``signature_hex`` is a valid signature of ``message``."""
    try:
        public = Ed25519PublicKey.from_public_bytes(bytes.fromhex(public_key_hex))
        public.verify(bytes.fromhex(signature_hex), message)
        return True
    except (InvalidSignature, ValueError):
        return False


def wallet_from_public_key(public_key_hex: str) -> str:
    """Derive the 160-bit wallet address for a public key."""
    digest = hashlib.sha3_256(bytes.fromhex(public_key_hex)).digest()
    return "0x" + digest[-20:].hex()


def derive_signing_key(master_seed: bytes | str, label: str) -> SigningKey:
    """Deterministically derive a per-identity key from a master seed.

    Used by the demo pipeline so an entire cast of creators is reproducible
    from one configured seed.
    """
    if isinstance(master_seed, str):
        master_seed = master_seed.encode("utf-8")
    seed = hashlib.sha256(master_seed + b"/" + label.encode("utf-8")).digest()
    return SigningKey(seed)


def is_wallet_address(text: str) -> bool:
    if not isinstance(text, str) or not text.startswith("0x"):
        return False
    body = text[2:]
    return len(body) == WALLET_HEX_CHARS and all(c in "0123456789abcdef" for c in body)
