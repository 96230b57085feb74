"""Pluggable signature schemes for transactions and consensus messages.

Public keys travel in a self-describing wire form: a one-byte scheme tag
followed by the scheme's raw public key. Verification dispatches on the tag,
so a transaction or proposal carries everything needed to check it.

Two schemes are registered:

* ``ed25519`` - the reference scheme (deterministic per RFC 8032), backed by
  the ``cryptography`` package.
* ``hash-test`` - a fast, trivially breakable scheme for high-volume property
  tests: the "public key" embeds the secret, so anyone holding it can forge.
  Never a security boundary; it exists so 10^4-trial suites stay quick.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

SCHEME_HASH_TEST = 0x01
SCHEME_ED25519 = 0x02

_SCHEME_NAMES = {SCHEME_HASH_TEST: "hash-test", SCHEME_ED25519: "ed25519"}
_NAME_TO_TAG = {v: k for k, v in _SCHEME_NAMES.items()}


class SigningError(ValueError):
    """Malformed key material or unknown scheme."""


@dataclass(frozen=True)
class KeyPair:
    """A scheme-tagged signing key pair.

    ``public_key`` is the wire form (tag byte + raw key) and is what gets
    embedded in transactions and consensus messages.
    """

    scheme: int
    secret: bytes
    public_key: bytes

    def sign(self, message: bytes) -> bytes:
        return sign(self, message)

    @property
    def scheme_name(self) -> str:
        return _SCHEME_NAMES[self.scheme]


def scheme_tag(name: str) -> int:
    try:
        return _NAME_TO_TAG[name]
    except KeyError:
        raise SigningError(f"unknown signature scheme: {name!r}") from None


def generate_keypair(scheme: int, seed: bytes) -> KeyPair:
    """Derive a key pair deterministically from a 32-byte seed."""
    if len(seed) != 32:
        raise SigningError(f"seed must be 32 bytes, got {len(seed)}")
    if scheme == SCHEME_ED25519:
        priv = Ed25519PrivateKey.from_private_bytes(seed)
        raw_pub = priv.public_key().public_bytes_raw()
        return KeyPair(scheme, seed, bytes([scheme]) + raw_pub)
    if scheme == SCHEME_HASH_TEST:
        # Public key IS the secret: verification recomputes the keyed hash.
        return KeyPair(scheme, seed, bytes([scheme]) + seed)
    raise SigningError(f"unknown signature scheme tag: {scheme:#x}")


def keypair_from_name(name: str, seed: bytes) -> KeyPair:
    return generate_keypair(scheme_tag(name), seed)


def account_keypair(label: str, scheme: int = SCHEME_HASH_TEST) -> KeyPair:
    """Deterministic per-label key pair, for tests, tooling, and demos."""
    return generate_keypair(scheme, hashlib.sha256(b"account:" + label.encode("utf-8")).digest())


def sign(keypair: KeyPair, message: bytes) -> bytes:
    if keypair.scheme == SCHEME_ED25519:
        return Ed25519PrivateKey.from_private_bytes(keypair.secret).sign(message)
    if keypair.scheme == SCHEME_HASH_TEST:
        return hashlib.sha256(keypair.secret + message).digest()
    raise SigningError(f"unknown signature scheme tag: {keypair.scheme:#x}")


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """Check ``signature`` over ``message`` under a wire-form public key.

    Malformed or unknown keys raise ``SigningError``; malformed signature
    bytes simply fail verification.
    """
    if len(public_key) < 2:
        raise SigningError("public key too short")
    tag, raw = public_key[0], public_key[1:]
    if tag == SCHEME_ED25519:
        if len(raw) != 32:
            raise SigningError(f"ed25519 public key must be 32 bytes, got {len(raw)}")
        if len(signature) != 64:
            return False
        try:
            Ed25519PublicKey.from_public_bytes(raw).verify(signature, message)
            return True
        except InvalidSignature:
            return False
    if tag == SCHEME_HASH_TEST:
        if len(raw) != 32:
            raise SigningError(f"hash-test public key must be 32 bytes, got {len(raw)}")
        return signature == hashlib.sha256(raw + message).digest()
    raise SigningError(f"unknown signature scheme tag: {tag:#x}")
