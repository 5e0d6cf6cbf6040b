"""Exception types shared across the package.

Every failure mode callers are expected to branch on gets its own class;
anything else surfaces as the nearest base class.
"""


class MedLedgerError(Exception):
    """Base class for all package errors."""


class ConfigError(MedLedgerError):
    """Network or bench configuration failed validation."""


# --- symmetric envelope ----------------------------------------------------

class CryptoError(MedLedgerError):
    """Base class for envelope / PHE failures."""


class TamperError(CryptoError):
    """Authentication tag did not verify: ciphertext, nonce or tag altered."""


class KeyMismatchError(CryptoError):
    """Payload was produced under a different key id."""


class MalformedPayloadError(CryptoError):
    """Payload structure is invalid (bad field lengths, truncated wire form)."""


class NonceExhaustedError(CryptoError):
    """The per-key nonce counter ran out; the key must be rotated."""


# --- Paillier --------------------------------------------------------------

class PheValidationError(CryptoError):
    """Plaintext out of range or unsupported key size."""


class CrossKeyError(CryptoError):
    """Ciphertexts under different public keys were combined or decrypted."""


class MalformedCiphertextError(CryptoError):
    """Ciphertext value is structurally invalid (not coprime with the modulus)."""


# --- ledger ----------------------------------------------------------------

class LedgerError(MedLedgerError):
    """Base class for block store failures."""


class IntegrityError(LedgerError):
    """Hash linkage or data hash did not verify."""


class SequenceError(LedgerError):
    """Block number does not match the current chain height."""


# --- transaction pipeline --------------------------------------------------

class PipelineError(MedLedgerError):
    """Base class for proposal / endorsement / ordering failures."""


class UnknownMemberError(PipelineError):
    """Creator credential is not registered with any organization."""


class NoLeaderError(PipelineError):
    """Ordering cluster has no leader right now; retry with backoff."""


class EndorsementError(PipelineError):
    """Endorsement policy could not be satisfied."""


class ChaincodeError(PipelineError):
    """Chaincode aborted the invocation."""


class AccessDeniedError(ChaincodeError):
    """ABAC evaluation denied the operation."""

    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or f"access denied ({reason})")
        self.reason = reason


class NotFoundError(ChaincodeError):
    """Requested record does not exist."""


class DuplicateError(ChaincodeError):
    """Record id (or transaction id) was already used."""
