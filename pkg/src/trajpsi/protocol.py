"""Client and server steps of the PSI and PSI-cardinality protocols.

Every function here is a pure message transform. Server-side functions take no
private key, so the server only ever manipulates ciphertexts.

Full PSI::

    client_prepare_query -> server_eval_full -> client_decode_full

Cardinality::

    client_prepare_query -> server_eval_cardinality -> client_decode_cardinality

Blinded on-device variant (the server publishes its encrypted vector and holds
the decryption key; the healthy client computes locally)::

    client_eval_blinded -> server decrypts -> client_unblind
"""
from __future__ import annotations

import enum
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from . import paillier
from .grid import GridMismatchError, TrajectoryBitVector
from .paillier import Ciphertext, KeyMismatchError, PrivateKey, PublicKey

__all__ = [
    "Mode",
    "EncryptedQuery",
    "PsiResponse",
    "BlindState",
    "LeakReport",
    "ProtocolViolation",
    "client_prepare_query",
    "server_eval_full",
    "server_eval_cardinality",
    "server_eval",
    "client_decode_full",
    "client_decode_cardinality",
    "demonstrate_rerandomization_leak",
    "client_eval_blinded",
    "client_unblind",
    "FULL_BLIND_BITS",
]

# multiplicative blinds are drawn from [1, 2**64), far below either prime of n
FULL_BLIND_BITS = 64


class Mode(str, enum.Enum):
    FULL = "FULL"
    CARDINALITY = "CARDINALITY"


class ProtocolViolation(RuntimeError):
    """A decrypted value is impossible for an honest run."""


@dataclass(frozen=True)
class EncryptedQuery:
    pk: PublicKey
    ciphertexts: Sequence[Ciphertext]
    grid_id: str
    mode: Mode

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))

    def __len__(self) -> int:
        return len(self.ciphertexts)


@dataclass(frozen=True)
class PsiResponse:
    mode: Mode
    payload: Sequence[Ciphertext]
    grid_id: str
    key_id: bytes
    length: int

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.CARDINALITY and len(self.payload) != 1:
            raise ValueError("cardinality response carries exactly one ciphertext")
        if self.mode is Mode.FULL and len(self.payload) != self.length:
            raise ValueError("full response must match the query length")


@dataclass(frozen=True)
class BlindState:
    mode: Mode
    blinds: tuple[int, ...]
    n: int
    length: int
    grid_id: str = ""

    def __repr__(self) -> str:
        # keep blinds out of logs
        return f"BlindState(mode={self.mode.value}, length={self.length})"


# -- client -----------------------------------------------------------------

def client_prepare_query(
    pk: PublicKey,
    sk: PrivateKey,
    v: TrajectoryBitVector,
    mode: Mode | str = Mode.FULL,
    rng=None,
) -> EncryptedQuery:
    cs = paillier.batch_encrypt_fast(sk, pk, v.tolist(), rng)
    return EncryptedQuery(pk, cs, v.grid_id, Mode(mode))


def client_decode_full(sk: PrivateKey, r: PsiResponse) -> TrajectoryBitVector:
    if r.mode is not Mode.FULL:
        raise ValueError("expected a FULL response")
    bits = []
    for i, c in enumerate(r.payload):
        t = paillier.decrypt(sk, c)
        if t not in (0, 1):
            raise ProtocolViolation(f"position {i} decrypted to a non-bit value")
        bits.append(t)
    return TrajectoryBitVector(bits, r.grid_id)


def client_decode_cardinality(sk: PrivateKey, r: PsiResponse) -> int:
    if r.mode is not Mode.CARDINALITY:
        raise ValueError("expected a CARDINALITY response")
    t = paillier.decrypt(sk, r.payload[0])
    if t > r.length:
        raise ProtocolViolation(f"cardinality {t} exceeds vector length {r.length}")
    return t


# -- server -----------------------------------------------------------------

def _check_query(q: EncryptedQuery, server_bits: TrajectoryBitVector, mode: Mode) -> None:
    if q.mode is not mode:
        raise ValueError(f"expected a {mode.value} query, got {q.mode.value}")
    if q.grid_id != server_bits.grid_id or len(q) != len(server_bits):
        raise GridMismatchError("query and server vector use different grids")
    kid = q.pk.key_id
    if any(c.key_id != kid for c in q.ciphertexts):
        raise KeyMismatchError("query mixes ciphertexts from different keys")


def _eval_full_chunk(pk: PublicKey, cs: Sequence[Ciphertext], bits: Sequence[int], rng) -> list[Ciphertext]:
    n2 = pk.n_squared
    out = []
    for c, t in zip(cs, bits):
        z = paillier.encrypt_zero(pk, rng)
        if t:
            out.append(Ciphertext(c.value * z.value % n2, pk.key_id))
        else:
            # c**0 == 1, so the product is the fresh zero encryption itself
            out.append(z)
    return out


def _eval_full_worker(args) -> list[Ciphertext]:
    pk, cs, bits = args
    return _eval_full_chunk(pk, cs, bits, random.SystemRandom())


def server_eval_full(
    q: EncryptedQuery,
    server_bits: TrajectoryBitVector,
    rng=None,
    *,
    workers: int = 1,
) -> PsiResponse:
    """Per position ``d_i = c_i**t_i * Enc(0)`` with a fresh zero encryption.

    With ``workers > 1`` positions are split into contiguous chunks evaluated
    in separate processes, each drawing from its own OS entropy stream.
    """
    _check_query(q, server_bits, Mode.FULL)
    bits = server_bits.tolist()
    cs = list(q.ciphertexts)
    if workers <= 1 or len(cs) < 2:
        payload = _eval_full_chunk(q.pk, cs, bits, rng)
    else:
        step = -(-len(cs) // workers)
        chunks = [(q.pk, cs[i : i + step], bits[i : i + step]) for i in range(0, len(cs), step)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            payload = [d for part in pool.map(_eval_full_worker, chunks) for d in part]
    return PsiResponse(Mode.FULL, payload, q.grid_id, q.pk.key_id, len(q))


def server_eval_cardinality(
    q: EncryptedQuery,
    server_bits: TrajectoryBitVector,
    rng=None,
) -> PsiResponse:
    """``d = prod_i c_i**t_i * Enc(0)``: one ciphertext, one zero encryption."""
    _check_query(q, server_bits, Mode.CARDINALITY)
    pk = q.pk
    n2 = pk.n_squared
    acc = paillier.encrypt_zero(pk, rng).value
    for c, t in zip(q.ciphertexts, server_bits.bits):
        if t:
            acc = acc * c.value % n2
    return PsiResponse(Mode.CARDINALITY, [Ciphertext(acc, pk.key_id)], q.grid_id, pk.key_id, len(q))


def server_eval(q: EncryptedQuery, server_bits: TrajectoryBitVector, rng=None, *, workers: int = 1) -> PsiResponse:
    if q.mode is Mode.FULL:
        return server_eval_full(q, server_bits, rng, workers=workers)
    return server_eval_cardinality(q, server_bits, rng)


# -- rerandomization demo ---------------------------------------------------

@dataclass
class LeakReport:
    """Outcome of evaluating a query with and without the ``Enc(0)`` factor.

    ``naive_leaks`` is True when the unrandomized response equals the query
    ciphertext exactly where the server bit is 1 and equals 1 exactly where it
    is 0, i.e. the server's vector can be read off the response.
    """

    length: int
    naive_equal_query: list[int] = field(default_factory=list)
    naive_equal_one: list[int] = field(default_factory=list)
    naive_leaks: bool = False
    recovered_server_bits: list[int] = field(default_factory=list)
    rerandomized_equalities: int = 0


def _naive_full(q: EncryptedQuery, server_bits: TrajectoryBitVector) -> list[Ciphertext]:
    return [paillier.scalar_mul(q.pk, c, int(t)) for c, t in zip(q.ciphertexts, server_bits.bits)]


def demonstrate_rerandomization_leak(q: EncryptedQuery, server_bits: TrajectoryBitVector, rng=None) -> LeakReport:
    if q.grid_id != server_bits.grid_id or len(q) != len(server_bits):
        raise GridMismatchError("query and server vector use different grids")
    naive = _naive_full(q, server_bits)
    report = LeakReport(length=len(q))
    for i, (c, d) in enumerate(zip(q.ciphertexts, naive)):
        if d.value == c.value:
            report.naive_equal_query.append(i)
        if d.value == 1:
            report.naive_equal_one.append(i)
    ones = [i for i, t in enumerate(server_bits.bits) if t]
    zeros = [i for i, t in enumerate(server_bits.bits) if not t]
    report.naive_leaks = report.naive_equal_query == ones and report.naive_equal_one == zeros
    report.recovered_server_bits = [int(d.value != 1) for d in naive]

    full_q = q if q.mode is Mode.FULL else EncryptedQuery(q.pk, q.ciphertexts, q.grid_id, Mode.FULL)
    safe = server_eval_full(full_q, server_bits, rng).payload
    report.rerandomized_equalities = sum(
        d.value == c.value or d.value == 1 for c, d in zip(q.ciphertexts, safe)
    )
    return report


# -- blinded on-device variant ----------------------------------------------

def client_eval_blinded(
    pk_server: PublicKey,
    encrypted_server_vector: Sequence[Ciphertext],
    client_bits: TrajectoryBitVector,
    mode: Mode | str = Mode.CARDINALITY,
    rng=None,
) -> tuple[PsiResponse, BlindState]:
    """Evaluate the intersection on-device against the server's published
    encrypted vector, then blind the result before it goes back for decryption.

    FULL multiplies each position by a secret nonzero scalar; the server still
    sees which positions are nonzero. CARDINALITY adds a secret offset ``b``.
    """
    mode = Mode(mode)
    rng = rng or paillier._system_random
    if len(encrypted_server_vector) != len(client_bits):
        raise GridMismatchError("published vector and client vector differ in length")
    kid = pk_server.key_id
    if any(c.key_id != kid for c in encrypted_server_vector):
        raise KeyMismatchError("published vector is not under the given public key")
    n, n2 = pk_server.n, pk_server.n_squared
    length = len(client_bits)

    if mode is Mode.FULL:
        blinds = tuple(paillier._draw(rng, 1, 1 << FULL_BLIND_BITS) for _ in range(length))
        payload = []
        for c, t, s in zip(encrypted_server_vector, client_bits.bits, blinds):
            # (c**t)**s * Enc(0) == c**(t*s) * Enc(0)
            d = paillier.scalar_mul(pk_server, c, int(t) * s)
            payload.append(paillier.add(pk_server, d, paillier.encrypt_zero(pk_server, rng)))
        state = BlindState(mode, blinds, n, length, client_bits.grid_id)
        return PsiResponse(mode, payload, client_bits.grid_id, kid, length), state

    acc = paillier.encrypt_zero(pk_server, rng).value
    for c, t in zip(encrypted_server_vector, client_bits.bits):
        if t:
            acc = acc * c.value % n2
    b = paillier._draw(rng, 0, n - length)
    blinded = paillier.add(pk_server, Ciphertext(acc, kid), paillier.encrypt(pk_server, b, rng))
    state = BlindState(mode, (b,), n, length, client_bits.grid_id)
    return PsiResponse(mode, [blinded], client_bits.grid_id, kid, length), state


def client_unblind(state: BlindState, decrypted_by_server):
    """Undo the blinding on values the server decrypted.

    Returns a :class:`TrajectoryBitVector` for FULL and an int for CARDINALITY.
    """
    if state.mode is Mode.FULL:
        values = list(decrypted_by_server)
        if len(values) != state.length:
            raise ProtocolViolation("decrypted vector length does not match the blinded query")
        return TrajectoryBitVector([int(v != 0) for v in values], state.grid_id or None)
    if isinstance(decrypted_by_server, (list, tuple)):
        (decrypted_by_server,) = decrypted_by_server
    count = (int(decrypted_by_server) - state.blinds[0]) % state.n
    if count > state.length:
        raise ProtocolViolation(f"unblinded cardinality {count} exceeds vector length {state.length}")
    return count
