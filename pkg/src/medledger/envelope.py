"""Authenticated encryption of health payloads and identity pseudonymization.

Payloads are sealed with AES-256-GCM (12-byte nonce, 16-byte tag) so any
alteration of the stored ciphertext is detected at decryption. Nonces are
never random: each key carries an atomic counter combined with a 4-byte
session salt, which makes nonce reuse within a key's lifetime impossible and
keeps encryption reproducible under a seeded salt.

Patient identities headed for the research channel are replaced by a keyed
digest (HMAC-SHA256 over the channel tag and the identifier). The mapping is
deterministic, so one patient's records stay linkable to each other, but it
cannot be reversed or even confirmed without the organization's domain key.
"""

from __future__ import annotations

import hmac
import hashlib
import os
import threading
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .codec import pack_bytes, unpack_bytes
from .errors import (
    KeyMismatchError,
    MalformedPayloadError,
    NonceExhaustedError,
    TamperError,
)

KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16

# 8-byte counter region of the nonce; past this the key must be rotated.
_NONCE_COUNTER_LIMIT = 1 << 64


@dataclass
class SymmetricKey:
    """A 256-bit AES key plus the per-key nonce counter.

    The counter is advanced under a lock so concurrent encryptors never
    share a nonce. `salt` fills the remaining 4 nonce bytes; it is drawn
    once when the key object is created (seeded in deterministic runs).
    """

    key_id: str
    key_bytes: bytes
    salt: bytes = b""
    _counter: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if len(self.key_bytes) != KEY_LEN:
            raise ValueError(f"key must be {KEY_LEN} bytes, got {len(self.key_bytes)}")
        if not self.key_id:
            raise ValueError("key_id must be non-empty")
        if not self.salt:
            self.salt = os.urandom(4)
        if len(self.salt) != 4:
            raise ValueError("salt must be 4 bytes")

    def next_nonce(self) -> bytes:
        with self._lock:
            if self._counter >= _NONCE_COUNTER_LIMIT:
                raise NonceExhaustedError(
                    f"nonce space exhausted for key {self.key_id!r}; rotate the key"
                )
            value = self._counter
            self._counter += 1
        return self.salt + value.to_bytes(8, "big")


@dataclass(frozen=True)
class EncryptedPayload:
    """Sealed payload: identifies its key, never repeats a nonce under it."""

    key_id: str
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes

    def to_bytes(self) -> bytes:
        """Wire form: key_id, nonce, ciphertext, tag, each length-prefixed."""
        return pack_bytes(
            self.key_id.encode("utf-8"), self.nonce, self.ciphertext, self.auth_tag
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedPayload":
        try:
            (kid, nonce, ct, tag), end = unpack_bytes(data, 4)
        except ValueError as exc:
            raise MalformedPayloadError(str(exc)) from exc
        if end != len(data):
            raise MalformedPayloadError("trailing bytes after payload")
        payload = cls(kid.decode("utf-8"), nonce, ct, tag)
        payload.validate_shape()
        return payload

    def validate_shape(self):
        if len(self.nonce) != NONCE_LEN:
            raise MalformedPayloadError(f"nonce must be {NONCE_LEN} bytes")
        if len(self.auth_tag) != TAG_LEN:
            raise MalformedPayloadError(f"auth tag must be {TAG_LEN} bytes")
        if not self.ciphertext:
            raise MalformedPayloadError("empty ciphertext")


@dataclass(frozen=True)
class Pseudonym:
    """Keyed digest standing in for a patient identifier on one channel."""

    value: str
    domain_tag: str


def encrypt_payload(key: SymmetricKey, plaintext: bytes) -> EncryptedPayload:
    """Seal `plaintext` under `key` with a fresh counter nonce."""
    if not plaintext:
        raise ValueError("plaintext must be non-empty")
    nonce = key.next_nonce()
    sealed = AESGCM(key.key_bytes).encrypt(nonce, plaintext, None)
    return EncryptedPayload(
        key_id=key.key_id,
        nonce=nonce,
        ciphertext=sealed[:-TAG_LEN],
        auth_tag=sealed[-TAG_LEN:],
    )


def decrypt_payload(key: SymmetricKey, payload: EncryptedPayload) -> bytes:
    """Open `payload`; returns the exact original plaintext or raises.

    Never returns partial data: a wrong key id raises KeyMismatchError, a
    structural defect raises MalformedPayloadError, and any bit flip in
    nonce, ciphertext or tag raises TamperError.
    """
    if payload.key_id != key.key_id:
        raise KeyMismatchError(
            f"payload was sealed under key {payload.key_id!r}, not {key.key_id!r}"
        )
    payload.validate_shape()
    try:
        return AESGCM(key.key_bytes).decrypt(
            payload.nonce, payload.ciphertext + payload.auth_tag, None
        )
    except InvalidTag as exc:
        raise TamperError("authentication failed: payload altered or wrong key") from exc


def pseudonymize(patient_id: str, domain_key: SymmetricKey, channel: str) -> Pseudonym:
    """Deterministic keyed pseudonym of `patient_id` for one channel."""
    if not patient_id:
        raise ValueError("patient_id must be non-empty")
    material = pack_bytes(channel.encode("utf-8"), patient_id.encode("utf-8"))
    digest = hmac.new(domain_key.key_bytes, material, hashlib.sha256).hexdigest()
    return Pseudonym(value=digest, domain_tag=channel)


class KeyStore:
    """In-memory key registry loaded once at startup.

    File format: one record per line, `key_id:hex(32-byte key)`. Lines
    starting with `#` and blank lines are ignored.
    """

    def __init__(self):
        self._keys: dict[str, SymmetricKey] = {}

    def add(self, key: SymmetricKey):
        if key.key_id in self._keys:
            raise ValueError(f"duplicate key id {key.key_id!r}")
        self._keys[key.key_id] = key

    def get(self, key_id: str) -> SymmetricKey:
        try:
            return self._keys[key_id]
        except KeyError:
            raise KeyMismatchError(f"no key {key_id!r} in store") from None

    def __contains__(self, key_id: str) -> bool:
        return key_id in self._keys

    def key_ids(self) -> list[str]:
        return list(self._keys)

    @classmethod
    def load(cls, path, salt_source=None) -> "KeyStore":
        store = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                key_id, sep, hexkey = line.partition(":")
                if not sep or not key_id:
                    raise ValueError(f"{path}:{lineno}: expected `key_id:hex`")
                try:
                    key_bytes = bytes.fromhex(hexkey)
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: bad hex key") from exc
                if len(key_bytes) != KEY_LEN:
                    raise ValueError(f"{path}:{lineno}: key must be {KEY_LEN} bytes")
                salt = salt_source(4) if salt_source else os.urandom(4)
                store.add(SymmetricKey(key_id=key_id, key_bytes=key_bytes, salt=salt))
        return store

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for key_id, key in self._keys.items():
                fh.write(f"{key_id}:{key.key_bytes.hex()}\n")
