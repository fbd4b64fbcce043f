"""Canonical JSON serialization and digest helpers.

Every signed or digested structure in this package goes through one
canonical byte form: JSON with sorted keys, no insignificant whitespace,
UTF-8 encoding, and lowercase hex for all binary fields. Two structurally
equal values always serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_json_bytes(value: Any) -> bytes:
    """Serialize ``value`` to canonical JSON bytes.

    Keys are sorted, separators carry no whitespace, and NaN/Infinity are
    rejected so the output is always valid, deterministic JSON.
    """
    return json.dumps(
        value,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_value(value: Any) -> str:
    """sha256 hex digest of a value's canonical JSON form."""
    return sha256_hex(canonical_json_bytes(value))


def is_hex(text: str, length: int | None = None) -> bool:
    """True if ``text`` is lowercase hex, optionally of exactly ``length`` chars."""
    if length is not None and len(text) != length:
        return False
    if not text:
        return False
    return all(c in "0123456789abcdef" for c in text)
