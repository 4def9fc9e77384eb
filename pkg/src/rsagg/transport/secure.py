"""Pairwise authenticated encryption relayed opaquely through the server.

Blob layout: 32-byte recipient key id | 24-byte nonce | sealed bytes.

Each blob key is derived from a static X25519 agreement between sender and
recipient, expanded with HKDF-SHA256 salted by the per-blob nonce, and used
once with ChaCha20-Poly1305. The key id is SHA-256 of the recipient's raw
public key.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from ..errors import SecureChannelError

KEY_ID_SIZE = 32
NONCE_SIZE = 24
PUBKEY_SIZE = 32
_AEAD_NONCE = bytes(12)  # each derived key seals exactly one message
_INFO = b"rsagg secure relay v1"


def key_id(pubkey: bytes) -> bytes:
    return hashlib.sha256(pubkey).digest()


class TransportKey:
    """A client's static X25519 keypair for the relayed channel."""

    def __init__(self, private: X25519PrivateKey):
        self._private = private
        self.public = private.public_key().public_bytes_raw()
        self.key_id = key_id(self.public)

    @classmethod
    def generate(cls, rng: np.random.Generator) -> "TransportKey":
        # drawn from the caller's rng so seeded runs are reproducible
        return cls(X25519PrivateKey.from_private_bytes(rng.bytes(32)))

    def shared(self, peer_public: bytes) -> bytes:
        try:
            peer = X25519PublicKey.from_public_bytes(peer_public)
            return self._private.exchange(peer)
        except ValueError as exc:
            raise SecureChannelError(f"bad peer public key: {exc}") from None


@dataclass(frozen=True)
class SecureBlob:
    recipient_key_id: bytes
    nonce: bytes
    sealed: bytes

    def to_bytes(self) -> bytes:
        return self.recipient_key_id + self.nonce + self.sealed

    @classmethod
    def from_bytes(cls, data: bytes) -> "SecureBlob":
        if len(data) < KEY_ID_SIZE + NONCE_SIZE + 16:
            raise SecureChannelError(f"blob too short ({len(data)} bytes)")
        return cls(
            bytes(data[:KEY_ID_SIZE]),
            bytes(data[KEY_ID_SIZE : KEY_ID_SIZE + NONCE_SIZE]),
            bytes(data[KEY_ID_SIZE + NONCE_SIZE :]),
        )


def _blob_key(shared: bytes, nonce: bytes, rid: bytes, sender_pub: bytes) -> bytes:
    hkdf = HKDF(algorithm=hashes.SHA256(), length=32, salt=nonce, info=_INFO + rid + sender_pub)
    return hkdf.derive(shared)


def secure_wrap(
    plain: bytes,
    sender: TransportKey,
    recipient_pub: bytes,
    rng: np.random.Generator,
    *,
    aad: bytes = b"",
) -> SecureBlob:
    nonce = rng.bytes(NONCE_SIZE)
    rid = key_id(recipient_pub)
    key = _blob_key(sender.shared(recipient_pub), nonce, rid, sender.public)
    sealed = ChaCha20Poly1305(key).encrypt(_AEAD_NONCE, bytes(plain), rid + nonce + aad)
    return SecureBlob(rid, nonce, sealed)


def secure_unwrap(
    blob: SecureBlob | bytes,
    recipient: TransportKey,
    sender_pub: bytes,
    *,
    aad: bytes = b"",
) -> bytes:
    if not isinstance(blob, SecureBlob):
        blob = SecureBlob.from_bytes(blob)
    if blob.recipient_key_id != recipient.key_id:
        raise SecureChannelError("blob is addressed to a different key")
    key = _blob_key(recipient.shared(sender_pub), blob.nonce, blob.recipient_key_id, sender_pub)
    try:
        return ChaCha20Poly1305(key).decrypt(_AEAD_NONCE, blob.sealed, blob.recipient_key_id + blob.nonce + aad)
    except InvalidTag:
        raise SecureChannelError("authentication failed") from None
