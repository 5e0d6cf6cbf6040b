"""Attribute records and policy evaluation for chaincode operations.

The policy is data, not code: one rule per operation, loaded from a plain
text table (`operation, required_role, constraint`). Evaluation is a pure
function of the subject's attributes, the operation and the subject's
relation to the target record, and denies by default. Constraint names
ending in `-or-admin` add the ledger-admin fallback: a subject whose role
is Admin passes regardless of relation.

Subjects without a stored attribute record act as role `guest`, which no
shipped rule accepts for anything but attribute lookup.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

ROLES = ("Patient", "Doctor", "Researcher", "Admin", "guest")
GUEST_ROLE = "guest"

DENY_UNKNOWN_OP = "unknown-op"
DENY_WRONG_ROLE = "wrong-role"
DENY_NOT_OWNER = "not-owner"
DENY_NOT_GRANTEE = "not-grantee"


class Relation(Enum):
    """Subject's relation to the record an operation targets."""
    OWNER = "owner"
    GRANTEE = "grantee"
    STRANGER = "stranger"


@dataclass
class UserAttributes:
    member_id: str
    role: str = GUEST_ROLE
    org_id: str = ""
    extra: dict = field(default_factory=dict)

    def to_json_bytes(self) -> bytes:
        record = {"member_id": self.member_id, "role": self.role,
                  "org_id": self.org_id, "extra": self.extra}
        return json.dumps(record, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_json_bytes(cls, data: bytes) -> "UserAttributes":
        record = json.loads(data.decode())
        return cls(member_id=record["member_id"], role=record["role"],
                   org_id=record.get("org_id", ""),
                   extra=record.get("extra", {}))

    @classmethod
    def guest(cls, member_id: str) -> "UserAttributes":
        return cls(member_id=member_id, role=GUEST_ROLE)


@dataclass(frozen=True)
class PolicyRule:
    operation: str
    required_role: str  # a role name, or "any"
    constraint: str     # any | owner | grantee | grantee-or-admin


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str = ""

    def __bool__(self):
        return self.allowed


ALLOW = Decision(True)

_CONSTRAINTS = {
    "any": lambda relation: True,
    "owner": lambda relation: relation == Relation.OWNER,
    "grantee": lambda relation: relation == Relation.GRANTEE,
    "grantee-or-admin": lambda relation: relation == Relation.GRANTEE,
}

_CONSTRAINT_DENIALS = {
    "owner": DENY_NOT_OWNER,
    "grantee": DENY_NOT_GRANTEE,
    "grantee-or-admin": DENY_NOT_GRANTEE,
}

# one rule per chaincode function; mirrors the shipped policy file
DEFAULT_POLICY_TEXT = """\
# operation, required_role, constraint
CreateEHR, Patient, any
QueryEHR, Doctor, grantee-or-admin
ShareEHR, Patient, owner
ApproveEHR, Doctor, grantee
AddEncryptedEHRs, Researcher, any
AssignAttributes, Admin, any
GetUserAttributes, any, any
PublishResearchRecord, Admin, any
"""


class PolicyTable:
    def __init__(self, rules: dict[str, PolicyRule]):
        self.rules = rules

    @classmethod
    def parse(cls, text: str, source: str = "<policy>") -> "PolicyTable":
        rules: dict[str, PolicyRule] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ValueError(
                    f"{source}:{lineno}: expected `operation, role, constraint`")
            operation, role, constraint = parts
            if role != "any" and role not in ROLES:
                raise ValueError(f"{source}:{lineno}: unknown role {role!r}")
            if constraint not in _CONSTRAINTS:
                raise ValueError(
                    f"{source}:{lineno}: unknown constraint {constraint!r}")
            if operation in rules:
                raise ValueError(
                    f"{source}:{lineno}: duplicate rule for {operation!r}")
            rules[operation] = PolicyRule(operation, role, constraint)
        return cls(rules)

    @classmethod
    def load(cls, path) -> "PolicyTable":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse(fh.read(), source=str(path))

    @classmethod
    def default(cls) -> "PolicyTable":
        return cls.parse(DEFAULT_POLICY_TEXT)

    def operations(self) -> set[str]:
        return set(self.rules)

    def evaluate(self, subject: UserAttributes, operation: str,
                 relation: Relation = Relation.STRANGER) -> Decision:
        """Pure policy decision; Decision.reason is machine-readable on deny."""
        rule = self.rules.get(operation)
        if rule is None:
            return Decision(False, DENY_UNKNOWN_OP)
        admin_fallback = rule.constraint.endswith("-or-admin")
        if admin_fallback and subject.role == "Admin":
            return ALLOW
        if rule.required_role != "any" and subject.role != rule.required_role:
            return Decision(False, DENY_WRONG_ROLE)
        if _CONSTRAINTS[rule.constraint](relation):
            return ALLOW
        return Decision(False, _CONSTRAINT_DENIALS.get(rule.constraint,
                                                       DENY_WRONG_ROLE))


def attribute_key(member_id: str) -> str:
    return f"attr/{member_id}"


def validate_role(role: str):
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}; valid roles: {ROLES}")
