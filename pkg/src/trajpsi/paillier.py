"""Paillier cryptosystem over big integers.

Keys use the generator ``g = n + 1`` so that ``g**m mod n**2 == 1 + m*n`` and
encryption costs a single modular exponentiation (``r**n``). Modular
exponentiation is delegated to GMP through :mod:`gmpy2`.

Entropy sources are any object exposing ``randrange(start, stop)``, e.g.
:class:`secrets.SystemRandom` (the default) or a seeded :class:`random.Random`
for reproducible tests. Never share one entropy object between processes.
"""
from __future__ import annotations

import hashlib
import secrets
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import gmpy2
from gmpy2 import mpz

__all__ = [
    "PublicKey",
    "PrivateKey",
    "Ciphertext",
    "PaillierError",
    "KeyMismatchError",
    "EntropyError",
    "keygen",
    "encrypt",
    "decrypt",
    "decrypt_direct",
    "add",
    "scalar_mul",
    "encrypt_zero",
    "batch_encrypt_fast",
    "decrypt_many",
    "SUPPORTED_BITS",
    "MIN_BITS",
]

SUPPORTED_BITS = (512, 1024, 2048, 4096)
MIN_BITS = 256
MILLER_RABIN_ROUNDS = 64
KEY_ID_LEN = 8

_system_random = secrets.SystemRandom()


class PaillierError(ValueError):
    """Invalid key, plaintext or ciphertext."""


class KeyMismatchError(PaillierError):
    """A ciphertext was used with a key it was not produced under."""


class EntropyError(RuntimeError):
    """The entropy source failed to deliver randomness."""


def _draw(rng, start: int, stop: int) -> int:
    try:
        return rng.randrange(start, stop)
    except (OSError, NotImplementedError) as exc:
        raise EntropyError(f"entropy source failed: {exc}") from exc


def _byte_len(bits: int) -> int:
    return (bits + 7) // 8


@dataclass(frozen=True)
class PublicKey:
    n: int
    bits: int
    g: int = field(init=False)
    n_squared: int = field(init=False, repr=False)
    key_id: bytes = field(init=False, repr=False)

    def __post_init__(self):
        n = mpz(self.n)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "g", n + 1)
        object.__setattr__(self, "n_squared", n * n)
        if n.bit_length() != self.bits:
            raise PaillierError(
                f"modulus has {n.bit_length()} bits, expected {self.bits}"
            )
        object.__setattr__(
            self, "key_id", hashlib.sha256(self.to_bytes()).digest()[:KEY_ID_LEN]
        )

    @property
    def ciphertext_len(self) -> int:
        """Byte width of a serialized ciphertext (width of n**2)."""
        return _byte_len(2 * self.bits)

    def to_bytes(self) -> bytes:
        """Canonical encoding: 4-byte big-endian bit count, then n big-endian."""
        return struct.pack(">I", self.bits) + int(self.n).to_bytes(
            _byte_len(self.bits), "big"
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "PublicKey":
        if len(data) < 4:
            raise PaillierError("truncated public key encoding")
        (bits,) = struct.unpack(">I", data[:4])
        body = data[4:]
        if len(body) != _byte_len(bits):
            raise PaillierError("public key encoding has wrong length")
        return cls(int.from_bytes(body, "big"), bits)


@dataclass(frozen=True)
class PrivateKey:
    """Decryption key. Keeps the prime factors for CRT decryption."""

    p: int
    q: int
    public_key: PublicKey = field(init=False, repr=False)
    lam: int = field(init=False, repr=False)
    mu: int = field(init=False, repr=False)

    def __post_init__(self):
        p, q = mpz(self.p), mpz(self.q)
        if p == q:
            raise PaillierError("p and q must be distinct")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        n = p * q
        pk = PublicKey(n, n.bit_length())
        lam = gmpy2.lcm(p - 1, q - 1)
        x = gmpy2.powmod(pk.g, lam, pk.n_squared)
        try:
            mu = gmpy2.invert((x - 1) // n, n)
        except ZeroDivisionError:
            raise PaillierError("L(g^lambda) is not invertible mod n") from None
        object.__setattr__(self, "public_key", pk)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)
        # CRT decryption constants
        p2, q2 = p * p, q * q
        object.__setattr__(self, "_p2", p2)
        object.__setattr__(self, "_q2", q2)
        object.__setattr__(self, "_hp", gmpy2.invert((gmpy2.powmod(pk.g, p - 1, p2) - 1) // p, p))
        object.__setattr__(self, "_hq", gmpy2.invert((gmpy2.powmod(pk.g, q - 1, q2) - 1) // q, q))
        object.__setattr__(self, "_q_inv_p", gmpy2.invert(q, p))

    @property
    def n(self) -> int:
        return self.public_key.n

    @property
    def key_id(self) -> bytes:
        return self.public_key.key_id

    def to_bytes(self) -> bytes:
        """Canonical encoding: magic, 4-byte bit count, then p and q each
        length-prefixed (2-byte big-endian)."""
        out = [b"PSK1", struct.pack(">I", self.public_key.bits)]
        for f in (self.p, self.q):
            raw = int(f).to_bytes(max(1, _byte_len(f.bit_length())), "big")
            out.append(struct.pack(">H", len(raw)) + raw)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PrivateKey":
        if data[:4] != b"PSK1" or len(data) < 8:
            raise PaillierError("not a private key encoding")
        (bits,) = struct.unpack(">I", data[4:8])
        pos, factors = 8, []
        for _ in range(2):
            if pos + 2 > len(data):
                raise PaillierError("truncated private key encoding")
            (ln,) = struct.unpack(">H", data[pos : pos + 2])
            factors.append(int.from_bytes(data[pos + 2 : pos + 2 + ln], "big"))
            pos += 2 + ln
        if pos != len(data):
            raise PaillierError("trailing bytes in private key encoding")
        sk = cls(*factors)
        if sk.public_key.bits != bits:
            raise PaillierError("private key bit count does not match factors")
        return sk


@dataclass(frozen=True, slots=True)
class Ciphertext:
    value: int
    key_id: bytes

    def to_bytes(self, pk: PublicKey) -> bytes:
        """Fixed-width big-endian value (width of n**2); key id travels separately."""
        return int(self.value).to_bytes(pk.ciphertext_len, "big")

    @classmethod
    def from_bytes(cls, pk: PublicKey, data: bytes) -> "Ciphertext":
        if len(data) != pk.ciphertext_len:
            raise PaillierError("ciphertext encoding has wrong width")
        value = mpz(int.from_bytes(data, "big"))
        if not 0 < value < pk.n_squared:
            raise PaillierError("ciphertext value out of range")
        return cls(value, pk.key_id)


def _check_key(pk_or_sk, c: Ciphertext) -> None:
    if c.key_id != pk_or_sk.key_id:
        raise KeyMismatchError("ciphertext was produced under a different key")


# -- key generation ---------------------------------------------------------

def _random_prime(bits: int, rng) -> mpz:
    # top two bits set so that the product of two such primes has 2*bits bits
    top = mpz(3) << (bits - 2)
    while True:
        cand = mpz(_draw(rng, 0, 1 << bits)) | top | 1
        if gmpy2.is_prime(cand, MILLER_RABIN_ROUNDS):
            return cand


def keygen(bits: int = 1024, rng=None, *, insecure: bool = False) -> tuple[PublicKey, PrivateKey]:
    """Generate a key pair whose modulus has exactly ``bits`` bits.

    Moduli below 256 bits are refused unless ``insecure`` is set (tests only).
    """
    if bits % 2 or bits < 16:
        raise PaillierError(f"key size must be an even number of bits >= 16, got {bits}")
    if bits < MIN_BITS and not insecure:
        raise PaillierError(f"key size {bits} is below the {MIN_BITS}-bit minimum")
    rng = rng or _system_random
    half = bits // 2
    while True:
        p = _random_prime(half, rng)
        q = _random_prime(half, rng)
        if p != q and (p * q).bit_length() == bits:
            sk = PrivateKey(p, q)
            return sk.public_key, sk


def _keypair_from_primes(p: int, q: int) -> tuple[PublicKey, PrivateKey]:
    """Build a key pair from fixed primes. Test hook for toy keys; no checks
    on size or primality beyond what decryption needs."""
    sk = PrivateKey(p, q)
    return sk.public_key, sk


# -- encryption -------------------------------------------------------------

def _random_unit(pk: PublicKey, rng) -> mpz:
    while True:
        r = mpz(_draw(rng, 1, pk.n))
        if gmpy2.gcd(r, pk.n) == 1:
            return r


def _encrypt_with(pk: PublicKey, m: int, r: int) -> mpz:
    # g^m = 1 + m*n (mod n^2) for g = n + 1
    return (1 + m * pk.n) * gmpy2.powmod(r, pk.n, pk.n_squared) % pk.n_squared


def _check_plaintext(pk: PublicKey, m: int) -> None:
    if not 0 <= m < pk.n:
        raise PaillierError("plaintext must satisfy 0 <= m < n")


def encrypt(pk: PublicKey, m: int, rng=None) -> Ciphertext:
    _check_plaintext(pk, m)
    r = _random_unit(pk, rng or _system_random)
    return Ciphertext(_encrypt_with(pk, m, r), pk.key_id)


def encrypt_zero(pk: PublicKey, rng=None) -> Ciphertext:
    """Fresh encryption of zero, ``r**n mod n**2``."""
    r = _random_unit(pk, rng or _system_random)
    return Ciphertext(gmpy2.powmod(r, pk.n, pk.n_squared), pk.key_id)


def _check_ciphertext(sk: PrivateKey, c: Ciphertext) -> None:
    _check_key(sk, c)
    pk = sk.public_key
    if not 0 < c.value < pk.n_squared:
        raise PaillierError("ciphertext value out of range")
    if gmpy2.gcd(c.value, pk.n) != 1:
        raise PaillierError("ciphertext is not invertible mod n^2")


def decrypt_direct(sk: PrivateKey, c: Ciphertext) -> int:
    """``L(c**lambda mod n**2) * mu mod n`` with ``L(x) = (x - 1) // n``."""
    _check_ciphertext(sk, c)
    n = sk.n
    x = gmpy2.powmod(c.value, sk.lam, sk.public_key.n_squared)
    return int((x - 1) // n * sk.mu % n)


def decrypt(sk: PrivateKey, c: Ciphertext) -> int:
    """Decrypt using the prime factors (CRT); same output as :func:`decrypt_direct`."""
    _check_ciphertext(sk, c)
    p, q = sk.p, sk.q
    mp = (gmpy2.powmod(c.value, p - 1, sk._p2) - 1) // p * sk._hp % p
    mq = (gmpy2.powmod(c.value, q - 1, sk._q2) - 1) // q * sk._hq % q
    return int(mq + (mp - mq) * sk._q_inv_p % p * q)


# -- homomorphic operations -------------------------------------------------

def add(pk: PublicKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    _check_key(pk, c1)
    _check_key(pk, c2)
    return Ciphertext(c1.value * c2.value % pk.n_squared, pk.key_id)


def scalar_mul(pk: PublicKey, c: Ciphertext, s: int) -> Ciphertext:
    _check_key(pk, c)
    if s < 0:
        raise PaillierError("scalar must be non-negative")
    if s == 0:
        return Ciphertext(mpz(1), pk.key_id)
    if s == 1:
        return Ciphertext(c.value, pk.key_id)
    return Ciphertext(gmpy2.powmod(c.value, s, pk.n_squared), pk.key_id)


# -- batched encryption -----------------------------------------------------

def batch_encrypt_fast(
    sk: PrivateKey | None,
    pk: PublicKey,
    messages: Iterable[int],
    rng=None,
    *,
    exponent_bits: int | None = None,
) -> list[Ciphertext]:
    """Encrypt a sequence sharing one expensive exponentiation.

    A single ``rho = r0**n mod n**2`` is computed per call and each message is
    encrypted as ``g**m * rho**x`` with a fresh ``x``. By default ``x`` is
    uniform in ``[0, lambda - 1]``, which needs the private key; the key owner
    also evaluates ``rho**x`` modulo ``p**2`` and ``q**2`` separately, where
    the exponent reduces mod ``p - 1`` (resp. ``q - 1``).

    With ``exponent_bits=K`` the exponent is drawn from ``[0, 2**K - 1]`` and
    ``sk`` may be None. Ciphertexts in one batch are then related: anyone who
    learns one plaintext can recover the rest in about ``2**K`` tries.
    """
    if sk is not None and sk.key_id != pk.key_id:
        raise KeyMismatchError("private key does not belong to public key")
    if exponent_bits is None and sk is None:
        raise PaillierError("the [0, lambda-1] exponent range requires the private key")
    if exponent_bits is not None and exponent_bits < 1:
        raise PaillierError("exponent_bits must be positive")
    messages = list(messages)
    for m in messages:
        _check_plaintext(pk, m)
    rng = rng or _system_random
    n, n2 = pk.n, pk.n_squared
    rho = gmpy2.powmod(_random_unit(pk, rng), n, n2)
    x_stop = sk.lam if exponent_bits is None else 1 << exponent_bits

    out = []
    if sk is None:
        for m in messages:
            x = _draw(rng, 0, x_stop)
            out.append(Ciphertext((1 + m * n) * gmpy2.powmod(rho, x, n2) % n2, pk.key_id))
        return out

    p, q, p2, q2 = sk.p, sk.q, sk._p2, sk._q2
    rho_p, rho_q = rho % p2, rho % q2
    # rho is an n-th residue: its order mod p^2 divides p - 1
    pm1, qm1 = p - 1, q - 1
    # CRT recombination coefficient for mod q^2 -> mod n^2
    q2_inv = gmpy2.invert(q2, p2)
    for m in messages:
        x = _draw(rng, 0, x_stop)
        ap = gmpy2.powmod(rho_p, x % pm1, p2)
        aq = gmpy2.powmod(rho_q, x % qm1, q2)
        masked = aq + (ap - aq) * q2_inv % p2 * q2
        out.append(Ciphertext((1 + m * n) * masked % n2, pk.key_id))
    return out


def decrypt_many(sk: PrivateKey, cs: Sequence[Ciphertext]) -> list[int]:
    return [decrypt(sk, c) for c in cs]
