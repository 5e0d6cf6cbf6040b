"""Simulated sensing devices and the edge layer that seals their readings.

Sensors are stand-ins: seeded bounded random walks per patient, so a run is
exactly reproducible from its seed. The edge node holds the credentials and
keys the sensors lack. For every sample it builds the canonical plaintext
`vital_type|value|sampled_at_ms`, seals it under the patient's AES key,
additionally encrypts the bare value homomorphically when the vital type is
configured aggregatable, and submits the result as a CreateEHR proposal.
Plaintext never crosses the edge boundary: everything handed to the client
is ciphertext plus non-identifying metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .codec import b64, pack_bytes, sha256_hex, u64
from .envelope import EncryptedPayload, SymmetricKey, encrypt_payload
from .errors import PipelineError
from .paillier import PaillierCiphertext, PaillierPublicKey, phe_encrypt


@dataclass(frozen=True)
class VitalProfile:
    unit: str
    low: int
    high: int
    start_range: tuple[int, int]
    step: int


VITAL_PROFILES = {
    "heart_rate": VitalProfile("bpm", 20, 250, (55, 100), 4),
    "glucose": VitalProfile("mg/dL", 40, 400, (80, 150), 8),
    "spo2": VitalProfile("%", 70, 100, (93, 99), 1),
}


@dataclass(frozen=True)
class VitalSample:
    patient_id: str
    vital_type: str
    value: int
    unit: str
    sampled_at: int  # milliseconds

    def canonical_plaintext(self) -> bytes:
        return f"{self.vital_type}|{self.value}|{self.sampled_at}".encode()

    def record_id(self) -> str:
        return sha256_hex(pack_bytes(self.patient_id.encode(),
                                     self.vital_type.encode())
                          + u64(self.sampled_at))


def generate_samples(seed: int, patient_count: int, samples_per_patient: int,
                     vital_types=("heart_rate",), interval_ms: int = 1000,
                     start_at_ms: int = 0,
                     patient_prefix: str = "PAT-") -> list[VitalSample]:
    """Deterministic interleaved streams, one per (patient, vital type).

    Values follow a clamped random walk inside each vital's physiological
    range; per-patient timestamps are strictly increasing.
    """
    import random
    rng = random.Random(seed)
    patients = [f"{patient_prefix}{i:04d}" for i in range(patient_count)]
    current = {
        (p, vt): rng.randint(*VITAL_PROFILES[vt].start_range)
        for p in patients for vt in vital_types
    }
    samples = []
    for tick in range(samples_per_patient):
        at = start_at_ms + tick * interval_ms
        for patient in patients:
            for vital_type in vital_types:
                profile = VITAL_PROFILES[vital_type]
                value = current[(patient, vital_type)]
                value += rng.randint(-profile.step, profile.step)
                value = max(profile.low, min(profile.high, value))
                current[(patient, vital_type)] = value
                samples.append(VitalSample(
                    patient_id=patient, vital_type=vital_type, value=value,
                    unit=profile.unit, sampled_at=at))
    return samples


@dataclass
class EdgeConfig:
    patient_identity: object  # MemberIdentity
    aes_key: SymmetricKey
    phe_public_key: PaillierPublicKey | None = None
    aggregatable: frozenset = frozenset({"heart_rate"})
    channel: str = "clinical"


class EdgeNode:
    """Holds one patient's credentials; formats, seals and submits samples."""

    def __init__(self, config: EdgeConfig, rng=None):
        import secrets
        self.config = config
        self.rng = rng or secrets.SystemRandom()
        self.dropped = 0
        self.submitted = 0

    def format_and_encrypt(self, sample: VitalSample):
        """Seal a sample; returns (payload, phe_ciphertext_or_None) or None
        when the value is outside the vital's configured range (the sample
        is dropped and counted, not raised)."""
        profile = VITAL_PROFILES.get(sample.vital_type)
        if profile is None or not (profile.low <= sample.value <= profile.high):
            self.dropped += 1
            return None
        payload = encrypt_payload(self.config.aes_key,
                                  sample.canonical_plaintext())
        phe_field = None
        if (sample.vital_type in self.config.aggregatable
                and self.config.phe_public_key is not None):
            phe_field = phe_encrypt(self.config.phe_public_key, sample.value,
                                    rng=self.rng)
        return payload, phe_field

    def create_args(self, sample: VitalSample,
                    sealed: tuple[EncryptedPayload, PaillierCiphertext | None]):
        payload, phe_field = sealed
        return [
            sample.record_id(),
            sample.vital_type,
            b64(payload.to_bytes()),
            b64(phe_field.to_bytes()) if phe_field is not None else "",
        ]

    def submit_async(self, network, sample: VitalSample, retries: int = 1):
        """Seal and submit one sample; retries once on a no-leader hint,
        never on validation failures. Returns the pending handle, or None
        when the sample was dropped."""
        sealed = self.format_and_encrypt(sample)
        if sealed is None:
            return None
        args = self.create_args(sample, sealed)
        self.submitted += 1
        pending = network.submit_async(self.config.channel, "CreateEHR", args,
                                       self.config.patient_identity)
        tracker = _RetryTracker(self, network, args, retries)
        pending.on_done(tracker.check)
        tracker.pending = pending
        return tracker

    def submit(self, network, sample: VitalSample, timeout: float = 30.0,
               retries: int = 1):
        """Synchronous submit: drives the scheduler until a receipt lands."""
        tracker = self.submit_async(network, sample, retries=retries)
        if tracker is None:
            return None
        done = network.scheduler.run_until(tracker.done, timeout)
        if not done:
            raise PipelineError("sample submission did not resolve in time")
        return tracker.receipt()


class _RetryTracker:
    """Resubmits a fresh proposal when ordering had no leader."""

    def __init__(self, edge: EdgeNode, network, args, retries: int):
        self.edge = edge
        self.network = network
        self.args = args
        self.retries = retries
        self.pending = None
        self._awaiting_retry = False

    def check(self, receipt):
        if (not receipt.valid and self.retries > 0
                and receipt.reason.startswith("NoLeaderError")):
            self.retries -= 1
            self._awaiting_retry = True
            backoff = self.network.scheduler.rng.uniform(0.2, 0.5)
            self.network.scheduler.call_later(backoff, self._resubmit)

    def _resubmit(self):
        self._awaiting_retry = False
        self.pending = self.network.submit_async(
            self.edge.config.channel, "CreateEHR", self.args,
            self.edge.config.patient_identity)
        self.pending.on_done(self.check)

    def done(self) -> bool:
        if self._awaiting_retry:
            return False
        receipt = self.pending.receipt
        if receipt is None:
            return False
        if (not receipt.valid and self.retries > 0
                and receipt.reason.startswith("NoLeaderError")):
            return False  # a retry is about to be scheduled
        return True

    def receipt(self):
        return self.pending.receipt
