"""Member identities and the membership registry.

Each network member holds an Ed25519 key pair issued at provisioning time.
The registry is the admission gate: a proposal or endorsement whose
signature does not verify against a registered key is rejected outright,
which is what keeps unregistered (Sybil) identities off the network.
Membership is static for the lifetime of a network, loaded from config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import UnknownMemberError


def _raw_public(key: Ed25519PublicKey) -> bytes:
    from cryptography.hazmat.primitives.serialization import (
        Encoding, PublicFormat)
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


def _raw_private(key: Ed25519PrivateKey) -> bytes:
    from cryptography.hazmat.primitives.serialization import (
        Encoding, NoEncryption, PrivateFormat)
    return key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())


@dataclass
class MemberIdentity:
    """A signing identity issued by one organization."""

    org_id: str
    member_id: str
    role_hint: str = ""
    is_org_admin: bool = False
    _signing_key: Ed25519PrivateKey = field(default=None, repr=False)

    def __post_init__(self):
        if self._signing_key is None:
            self._signing_key = Ed25519PrivateKey.generate()

    @classmethod
    def create(cls, org_id: str, member_id: str, role_hint: str = "",
               is_org_admin: bool = False, seed: bytes | None = None):
        key = (Ed25519PrivateKey.from_private_bytes(seed) if seed
               else Ed25519PrivateKey.generate())
        return cls(org_id=org_id, member_id=member_id, role_hint=role_hint,
                   is_org_admin=is_org_admin, _signing_key=key)

    @property
    def qualified_id(self) -> str:
        return f"{self.org_id}/{self.member_id}"

    @property
    def verify_key_bytes(self) -> bytes:
        return _raw_public(self._signing_key.public_key())

    def sign(self, message: bytes) -> bytes:
        return self._signing_key.sign(message)

    def to_file(self, path):
        record = {
            "org_id": self.org_id,
            "member_id": self.member_id,
            "role_hint": self.role_hint,
            "is_org_admin": self.is_org_admin,
            "signing_key": _raw_private(self._signing_key).hex(),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_file(cls, path) -> "MemberIdentity":
        with open(path, "r", encoding="utf-8") as fh:
            record = json.load(fh)
        key = Ed25519PrivateKey.from_private_bytes(bytes.fromhex(record["signing_key"]))
        return cls(org_id=record["org_id"], member_id=record["member_id"],
                   role_hint=record.get("role_hint", ""),
                   is_org_admin=record.get("is_org_admin", False),
                   _signing_key=key)


class MembershipRegistry:
    """Verification keys of every admitted member, keyed by org/member."""

    def __init__(self):
        self._members: dict[str, tuple[str, bytes, bool]] = {}

    def register(self, identity: MemberIdentity):
        qid = identity.qualified_id
        if qid in self._members:
            raise ValueError(f"member {qid!r} already registered")
        self._members[qid] = (identity.org_id, identity.verify_key_bytes,
                              identity.is_org_admin)

    def is_registered(self, qualified_id: str) -> bool:
        return qualified_id in self._members

    def org_of(self, qualified_id: str) -> str:
        self._require(qualified_id)
        return self._members[qualified_id][0]

    def is_org_admin(self, qualified_id: str) -> bool:
        self._require(qualified_id)
        return self._members[qualified_id][2]

    def verify(self, qualified_id: str, message: bytes, signature: bytes) -> bool:
        self._require(qualified_id)
        key = Ed25519PublicKey.from_public_bytes(self._members[qualified_id][1])
        try:
            key.verify(signature, message)
            return True
        except InvalidSignature:
            return False

    def _require(self, qualified_id: str):
        if qualified_id not in self._members:
            raise UnknownMemberError(f"member {qualified_id!r} is not registered")
