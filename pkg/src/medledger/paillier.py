"""Additive homomorphic encryption for research-side aggregation.

Implements the simplified-generator variant of the Paillier cryptosystem
(g = n + 1), which supports exactly the operation the research channel
needs: adding two ciphertexts so the sum of the underlying vitals can be
recovered only by the key authority.

    keygen    n = p*q, lambda = (p-1)(q-1), mu = lambda^-1 mod n
    encrypt   c = (1 + m*n) * r^n  mod n^2,  r uniform in (0, n), gcd(r, n)=1
    add       c = c_a * c_b        mod n^2
    decrypt   m = L(c^lambda mod n^2) * mu  mod n,  L(u) = (u - 1) / n

Decryption additionally uses the CRT split over p and q, which is an exact
speedup (roughly 4x) of the formula above. gmpy2 backs the big-integer
arithmetic when available; pure-Python equivalents are used otherwise.
"""

from __future__ import annotations

import math
import secrets
from dataclasses import dataclass

from .codec import int_from_bytes, int_to_bytes, sha256, unpack_bytes
from .errors import CrossKeyError, MalformedCiphertextError, PheValidationError

try:
    import gmpy2

    def _powmod(base: int, exp: int, mod: int) -> int:
        return int(gmpy2.powmod(base, exp, mod))

    def _invert(value: int, mod: int) -> int:
        return int(gmpy2.invert(value, mod))

    def _next_prime(value: int) -> int:
        return int(gmpy2.next_prime(value))

except ImportError:  # pragma: no cover - exercised only without gmpy2
    _powmod = pow

    def _invert(value: int, mod: int) -> int:
        return pow(value, -1, mod)

    def _next_prime(value: int) -> int:
        candidate = value + 1
        if candidate % 2 == 0:
            candidate += 1
        while not _is_probable_prime(candidate):
            candidate += 2
        return candidate

    def _is_probable_prime(n: int, rounds: int = 40) -> bool:
        if n < 2:
            return False
        for p in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
            if n % p == 0:
                return n == p
        d, s = n - 1, 0
        while d % 2 == 0:
            d //= 2
            s += 1
        for _ in range(rounds):
            a = secrets.randbelow(n - 3) + 2
            x = pow(a, d, n)
            if x in (1, n - 1):
                continue
            for _ in range(s - 1):
                x = pow(x, 2, n)
                if x == n - 1:
                    break
            else:
                return False
        return True


SUPPORTED_BIT_LENGTHS = (1024, 2048, 3072)
DEFAULT_BIT_LENGTH = 2048
FINGERPRINT_LEN = 32


@dataclass(frozen=True)
class PaillierPublicKey:
    n: int
    g: int
    bit_length: int

    @property
    def nsquare(self) -> int:
        return self.n * self.n

    @property
    def fingerprint(self) -> bytes:
        """SHA-256 over the big-endian magnitude of n (g is implied by n)."""
        return sha256(int_to_bytes(self.n))

    def to_decimal(self) -> str:
        return str(self.n)

    @classmethod
    def from_decimal(cls, text: str) -> "PaillierPublicKey":
        n = int(text)
        return cls(n=n, g=n + 1, bit_length=n.bit_length())


@dataclass(frozen=True)
class PaillierPrivateKey:
    """Private half: lam/mu drive the textbook formula, p/q the CRT path."""

    lam: int
    mu: int
    p: int
    q: int

    def to_decimal_fields(self) -> dict[str, str]:
        return {"lambda": str(self.lam), "mu": str(self.mu),
                "p": str(self.p), "q": str(self.q)}

    @classmethod
    def from_decimal_fields(cls, fields: dict[str, str]) -> "PaillierPrivateKey":
        return cls(lam=int(fields["lambda"]), mu=int(fields["mu"]),
                   p=int(fields["p"]), q=int(fields["q"]))


@dataclass(frozen=True)
class PaillierCiphertext:
    c: int
    key_fingerprint: bytes

    def to_bytes(self) -> bytes:
        """Wire form: 4-byte length, big-endian magnitude of c, fingerprint."""
        magnitude = int_to_bytes(self.c)
        return len(magnitude).to_bytes(4, "big") + magnitude + self.key_fingerprint

    @classmethod
    def from_bytes(cls, data: bytes) -> "PaillierCiphertext":
        try:
            (magnitude,), end = unpack_bytes(data, 1)
        except ValueError as exc:
            raise MalformedCiphertextError(str(exc)) from exc
        fingerprint = data[end:]
        if len(fingerprint) != FINGERPRINT_LEN:
            raise MalformedCiphertextError("bad fingerprint length")
        return cls(c=int_from_bytes(magnitude), key_fingerprint=fingerprint)


def _random_prime(bits: int, rng) -> int:
    # next_prime over a random odd with both top bits set keeps n at full width
    seed = rng.getrandbits(bits) | (1 << (bits - 1)) | (1 << (bits - 2)) | 1
    return _next_prime(seed)


def keygen(bit_length: int = DEFAULT_BIT_LENGTH, rng=None):
    """Generate a key pair. `rng` defaults to a system-entropy source;
    pass a seeded `random.Random` only for reproducible test networks."""
    if bit_length not in SUPPORTED_BIT_LENGTHS:
        raise PheValidationError(
            f"unsupported key size {bit_length}; choose one of {SUPPORTED_BIT_LENGTHS}"
        )
    rng = rng or secrets.SystemRandom()
    half = bit_length // 2
    while True:
        p = _random_prime(half, rng)
        q = _random_prime(half, rng)
        if p == q:
            continue
        n = p * q
        if n.bit_length() == bit_length:
            break
    lam = (p - 1) * (q - 1)
    mu = _invert(lam, n)
    public = PaillierPublicKey(n=n, g=n + 1, bit_length=bit_length)
    private = PaillierPrivateKey(lam=lam, mu=mu, p=p, q=q)
    return public, private


def phe_encrypt(pk: PaillierPublicKey, m: int, rng=None) -> PaillierCiphertext:
    """Encrypt a non-negative integer below n. Probabilistic: repeated calls
    on the same plaintext yield distinct ciphertexts."""
    if not isinstance(m, int) or m < 0 or m >= pk.n:
        raise PheValidationError(f"plaintext must be an integer in [0, n); got {m!r}")
    rng = rng or secrets.SystemRandom()
    while True:
        r = rng.randrange(1, pk.n)
        if math.gcd(r, pk.n) == 1:
            break
    nsq = pk.nsquare
    # (n+1)^m mod n^2 == 1 + m*n, so only the obfuscator needs a powmod
    c = ((1 + m * pk.n) % nsq) * _powmod(r, pk.n, nsq) % nsq
    return PaillierCiphertext(c=c, key_fingerprint=pk.fingerprint)


def phe_add(pk: PaillierPublicKey, a: PaillierCiphertext,
            b: PaillierCiphertext) -> PaillierCiphertext:
    """Homomorphic addition: decrypts to (m_a + m_b) mod n."""
    fp = pk.fingerprint
    if a.key_fingerprint != fp or b.key_fingerprint != fp:
        raise CrossKeyError("ciphertexts under different keys cannot be combined")
    return PaillierCiphertext(c=(a.c * b.c) % pk.nsquare, key_fingerprint=fp)


def phe_decrypt(sk: PaillierPrivateKey, pk: PaillierPublicKey,
                ct: PaillierCiphertext) -> int:
    """Exact plaintext in [0, n). Rejects cross-key and malformed inputs."""
    if ct.key_fingerprint != pk.fingerprint:
        raise CrossKeyError("ciphertext fingerprint does not match this key")
    if not (1 <= ct.c < pk.nsquare):
        raise MalformedCiphertextError("ciphertext out of range")
    if math.gcd(ct.c, pk.n) != 1:
        raise MalformedCiphertextError("ciphertext shares a factor with the modulus")
    p, q, n = sk.p, sk.q, pk.n
    psq, qsq = p * p, q * q
    # with g = n+1, L_p(g^(p-1) mod p^2) reduces to (p-1)*q mod p
    hp = _invert((p - 1) * q % p, p)
    hq = _invert((q - 1) * p % q, q)
    mp = (_powmod(ct.c, p - 1, psq) - 1) // p * hp % p
    mq = (_powmod(ct.c, q - 1, qsq) - 1) // q * hq % q
    # recombine mod n
    u = (mq - mp) * _invert(p % q, q) % q
    return (mp + p * u) % n
