"""EHR chaincode: the contract functions peers execute during endorsement.

Every function checks policy before touching record data, reads and writes
only through the invocation context (so read/write sets are captured for
commit-time validation), and is strictly deterministic: identical state and
arguments always produce identical write sets.

Stored values never include plaintext vitals. Clinical records carry an
authenticated AES envelope plus, for aggregatable vital types, an additive
homomorphic ciphertext. Research-channel records carry only the pseudonym,
the vital type and the homomorphic field, so nothing on that channel can
be tied to a patient or decrypted with clinical keys.

The invocation context is duck-typed; it must provide `channel`,
`creator_member`, `is_org_admin`, `timestamp`, `policy`, `phe_public_key`,
`get_state`, `put_state` and `emit_event`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .abac import (
    GUEST_ROLE,
    Relation,
    UserAttributes,
    attribute_key,
    validate_role,
)
from .codec import b64, unb64
from .envelope import EncryptedPayload, SymmetricKey, pseudonymize
from .errors import (
    AccessDeniedError,
    ChaincodeError,
    DuplicateError,
    MalformedPayloadError,
    NotFoundError,
)
from .paillier import PaillierCiphertext, phe_add


def ehr_key(owner: str, record_id: str) -> str:
    return f"ehr/{owner}/{record_id}"


def share_key(record_id: str, grantee: str) -> str:
    return f"share/{record_id}/{grantee}"


@dataclass
class EHRRecord:
    record_id: str
    owner: str
    vital_type: str
    payload: EncryptedPayload | None
    phe_field: PaillierCiphertext | None
    created_at: int
    approved: bool = False
    approver: str | None = None

    def to_json_bytes(self) -> bytes:
        record = {
            "record_id": self.record_id,
            "owner": self.owner,
            "vital_type": self.vital_type,
            "payload": b64(self.payload.to_bytes()) if self.payload else None,
            "phe": b64(self.phe_field.to_bytes()) if self.phe_field else None,
            "created_at": self.created_at,
            "approved": self.approved,
            "approver": self.approver,
        }
        return json.dumps(record, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_json_bytes(cls, data: bytes) -> "EHRRecord":
        record = json.loads(data.decode())
        payload = (EncryptedPayload.from_bytes(unb64(record["payload"]))
                   if record.get("payload") else None)
        phe = (PaillierCiphertext.from_bytes(unb64(record["phe"]))
               if record.get("phe") else None)
        return cls(record_id=record["record_id"], owner=record["owner"],
                   vital_type=record["vital_type"], payload=payload,
                   phe_field=phe, created_at=record["created_at"],
                   approved=record["approved"], approver=record["approver"])


def _subject(ctx) -> UserAttributes:
    stored = ctx.get_state(attribute_key(ctx.creator_member))
    if stored is None:
        return UserAttributes.guest(ctx.creator_member)
    return UserAttributes.from_json_bytes(stored)


def _require(decision):
    if not decision.allowed:
        raise AccessDeniedError(decision.reason)


def _relation_to_record(ctx, owner: str, record_id: str) -> Relation:
    if owner == ctx.creator_member:
        return Relation.OWNER
    if ctx.get_state(share_key(record_id, ctx.creator_member)) is not None:
        return Relation.GRANTEE
    return Relation.STRANGER


def _load_record(ctx, owner: str, record_id: str) -> EHRRecord:
    stored = ctx.get_state(ehr_key(owner, record_id))
    if stored is None:
        raise NotFoundError(f"no record {record_id!r} for owner {owner!r}")
    return EHRRecord.from_json_bytes(stored)


def _args(args: list[bytes], expected: int, fn: str) -> list[str]:
    if len(args) != expected:
        raise ChaincodeError(f"{fn} expects {expected} args, got {len(args)}")
    try:
        return [a.decode("utf-8") for a in args]
    except UnicodeDecodeError as exc:
        raise ChaincodeError(f"{fn}: args must be text (binary goes base64)") from exc


def create_ehr(ctx, args: list[bytes]) -> bytes:
    record_id, vital_type, payload_b64, phe_b64 = _args(args, 4, "CreateEHR")
    subject = _subject(ctx)
    _require(ctx.policy.evaluate(subject, "CreateEHR", Relation.OWNER))
    key = ehr_key(ctx.creator_member, record_id)
    if ctx.get_state(key) is not None:
        raise DuplicateError(f"record {record_id!r} already exists")
    try:
        payload = EncryptedPayload.from_bytes(unb64(payload_b64))
    except (MalformedPayloadError, ValueError) as exc:
        raise ChaincodeError(f"malformed payload: {exc}") from exc
    phe_field = None
    if phe_b64:
        phe_field = PaillierCiphertext.from_bytes(unb64(phe_b64))
    record = EHRRecord(record_id=record_id, owner=ctx.creator_member,
                       vital_type=vital_type, payload=payload,
                       phe_field=phe_field, created_at=ctx.timestamp)
    ctx.put_state(key, record.to_json_bytes())
    ctx.emit_event("ehr-created", key)
    return key.encode()


def query_ehr(ctx, args: list[bytes]) -> bytes:
    owner, record_id = _args(args, 2, "QueryEHR")
    subject = _subject(ctx)
    relation = _relation_to_record(ctx, owner, record_id)
    _require(ctx.policy.evaluate(subject, "QueryEHR", relation))
    record = _load_record(ctx, owner, record_id)
    return record.to_json_bytes()


def share_ehr(ctx, args: list[bytes]) -> bytes:
    record_id, grantee = _args(args, 2, "ShareEHR")
    subject = _subject(ctx)
    owns = ctx.get_state(ehr_key(ctx.creator_member, record_id)) is not None
    relation = Relation.OWNER if owns else Relation.STRANGER
    _require(ctx.policy.evaluate(subject, "ShareEHR", relation))
    key = share_key(record_id, grantee)
    grant = {"record_id": record_id, "grantee": grantee,
             "granted_by": ctx.creator_member, "granted_at": ctx.timestamp}
    ctx.put_state(key, json.dumps(grant, sort_keys=True,
                                  separators=(",", ":")).encode())
    ctx.emit_event("ehr-shared", key)
    return key.encode()


def approve_ehr(ctx, args: list[bytes]) -> bytes:
    owner, record_id = _args(args, 2, "ApproveEHR")
    subject = _subject(ctx)
    relation = _relation_to_record(ctx, owner, record_id)
    _require(ctx.policy.evaluate(subject, "ApproveEHR", relation))
    record = _load_record(ctx, owner, record_id)
    if record.approved:
        return b"noop"
    record.approved = True
    record.approver = ctx.creator_member
    key = ehr_key(owner, record_id)
    ctx.put_state(key, record.to_json_bytes())
    ctx.emit_event("ehr-approved", key)
    return b"approved"


def add_encrypted_ehrs(ctx, args: list[bytes]) -> bytes:
    owner_a, record_a, owner_b, record_b, out_id = _args(
        args, 5, "AddEncryptedEHRs")
    subject = _subject(ctx)
    _require(ctx.policy.evaluate(subject, "AddEncryptedEHRs", Relation.STRANGER))
    rec_a = _load_record(ctx, owner_a, record_a)
    rec_b = _load_record(ctx, owner_b, record_b)
    if rec_a.phe_field is None or rec_b.phe_field is None:
        raise ChaincodeError("both records need an aggregatable encrypted field")
    if rec_a.vital_type != rec_b.vital_type:
        raise ChaincodeError("records measure different vital types")
    if ctx.phe_public_key is None:
        raise ChaincodeError("channel has no aggregation public key")
    total = phe_add(ctx.phe_public_key, rec_a.phe_field, rec_b.phe_field)
    out_key = ehr_key(ctx.creator_member, out_id)
    if ctx.get_state(out_key) is not None:
        raise DuplicateError(f"record {out_id!r} already exists")
    aggregate = EHRRecord(record_id=out_id, owner=ctx.creator_member,
                          vital_type=rec_a.vital_type, payload=None,
                          phe_field=total, created_at=ctx.timestamp)
    ctx.put_state(out_key, aggregate.to_json_bytes())
    ctx.emit_event("ehr-aggregated", out_key)
    return out_key.encode()


def assign_attributes(ctx, args: list[bytes]) -> bytes:
    if len(args) == 3:
        args = args + [b"{}"]
    target, role, org_id, extra_json = _args(args, 4, "AssignAttributes")
    subject = _subject(ctx)
    if not ctx.is_org_admin:
        _require(ctx.policy.evaluate(subject, "AssignAttributes",
                                     Relation.STRANGER))
    try:
        validate_role(role)
    except ValueError as exc:
        raise ChaincodeError(str(exc)) from exc
    try:
        extra = json.loads(extra_json)
    except json.JSONDecodeError as exc:
        raise ChaincodeError(f"extra attributes must be JSON: {exc}") from exc
    record = UserAttributes(member_id=target, role=role, org_id=org_id,
                            extra=extra)
    key = attribute_key(target)
    ctx.put_state(key, record.to_json_bytes())
    ctx.emit_event("attributes-assigned", key)
    return key.encode()


def get_user_attributes(ctx, args: list[bytes]) -> bytes:
    (member,) = _args(args, 1, "GetUserAttributes")
    subject = _subject(ctx)
    _require(ctx.policy.evaluate(subject, "GetUserAttributes",
                                 Relation.STRANGER))
    stored = ctx.get_state(attribute_key(member))
    if stored is None:
        return UserAttributes.guest(member).to_json_bytes()
    return stored


def publish_research_record(ctx, args: list[bytes]) -> bytes:
    pseudonym, record_id, vital_type, phe_b64, created_at = _args(
        args, 5, "PublishResearchRecord")
    subject = _subject(ctx)
    _require(ctx.policy.evaluate(subject, "PublishResearchRecord",
                                 Relation.STRANGER))
    if not phe_b64:
        raise ChaincodeError("a research record needs an aggregatable field")
    phe_field = PaillierCiphertext.from_bytes(unb64(phe_b64))
    record = EHRRecord(record_id=record_id, owner=pseudonym,
                       vital_type=vital_type, payload=None,
                       phe_field=phe_field, created_at=int(created_at))
    key = ehr_key(pseudonym, record_id)
    existing = ctx.get_state(key)
    encoded = record.to_json_bytes()
    if existing is not None and existing != encoded:
        raise DuplicateError(f"conflicting research record at {key!r}")
    ctx.put_state(key, encoded)
    ctx.emit_event("research-published", key)
    return key.encode()


CHAINCODE_FUNCTIONS = {
    "CreateEHR": create_ehr,
    "QueryEHR": query_ehr,
    "ShareEHR": share_ehr,
    "ApproveEHR": approve_ehr,
    "AddEncryptedEHRs": add_encrypted_ehrs,
    "AssignAttributes": assign_attributes,
    "GetUserAttributes": get_user_attributes,
    "PublishResearchRecord": publish_research_record,
}


def dispatch(ctx, fn_name: str, args: list[bytes]) -> bytes:
    handler = CHAINCODE_FUNCTIONS.get(fn_name)
    if handler is None:
        raise ChaincodeError(f"unknown chaincode function {fn_name!r}")
    return handler(ctx, args)


def publish_to_research(client, service_identity, owner: str, record_id: str,
                        domain_key: SymmetricKey,
                        clinical_channel: str = "clinical",
                        research_channel: str = "research"):
    """Copy one clinical record to the research channel without identifiers.

    Runs as an organization service identity: reads the clinical record,
    derives the channel pseudonym with the org-held domain key, strips the
    AES envelope and submits only (pseudonym, vital type, homomorphic
    field). Deterministic, so re-publishing is idempotent.
    """
    response = client.query(clinical_channel, "QueryEHR",
                            [owner, record_id], service_identity)
    record = EHRRecord.from_json_bytes(response)
    if record.phe_field is None:
        raise ChaincodeError(
            f"record {record_id!r} has no aggregatable field to publish")
    pseudonym = pseudonymize(owner, domain_key, research_channel)
    receipt = client.invoke(
        research_channel, "PublishResearchRecord",
        [pseudonym.value, record_id, record.vital_type,
         b64(record.phe_field.to_bytes()), str(record.created_at)],
        service_identity)
    return ehr_key(pseudonym.value, record_id), receipt
