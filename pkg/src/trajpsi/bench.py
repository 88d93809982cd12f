"""Benchmark harness: protocol cost across vector sizes and key widths.

Each cell runs the full protocol in-process through the wire encoding, checks
the decoded answer against the plaintext AND/popcount before keeping any
timing, and records the frame sizes that would cross the network.
"""
from __future__ import annotations

import csv
import math
import random
import time
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from . import paillier, protocol, wire
from .grid import TrajectoryBitVector
from .protocol import Mode

SIZE_DOUBLING_BAND = (1.5, 3.0)
BITS_DOUBLING_BAND = (3.0, 10.0)


@dataclass
class BenchResult:
    set_size: int
    key_bits: int
    mode: str
    server_time: float
    client_encrypt_time: float
    client_decrypt_time: float
    bytes_up: int
    bytes_down: int
    # communication model: N elements of M bits, M read as plaintext bits or ciphertext bits
    model_bits_plaintext: int
    model_bits_ciphertext: int
    worker_count: int
    timestamp: float
    ok: bool = True
    error: str = ""


CSV_FIELDS = [f.name for f in fields(BenchResult)]


def parse_sizes(text: str) -> list[int]:
    """``"10..14"`` -> powers of two 2**10..2**14; otherwise a comma list where
    items may be written ``2^k``."""
    text = text.strip()
    if ".." in text:
        lo, hi = (int(x) for x in text.split(".."))
        return [1 << k for k in range(lo, hi + 1)]
    out = []
    for item in text.split(","):
        item = item.strip()
        if item.startswith("2^"):
            out.append(1 << int(item[2:]))
        elif item:
            out.append(int(item))
    return out


def parse_modes(text: str) -> list[Mode]:
    text = text.strip().lower()
    if text == "both":
        return [Mode.FULL, Mode.CARDINALITY]
    return [{"full": Mode.FULL, "card": Mode.CARDINALITY, "cardinality": Mode.CARDINALITY}[text]]


def _random_vector(size: int, rng: random.Random) -> TrajectoryBitVector:
    return TrajectoryBitVector([rng.getrandbits(1) for _ in range(size)])


def run_cell(
    size: int,
    keypair: tuple[paillier.PublicKey, paillier.PrivateKey],
    mode: Mode,
    *,
    seed: int | None = None,
    workers: int = 1,
    repeats: int = 1,
) -> BenchResult:
    pk, sk = keypair
    vec_rng = random.Random(seed)
    a = _random_vector(size, vec_rng)
    b = _random_vector(size, vec_rng)
    result = BenchResult(
        set_size=size,
        key_bits=pk.bits,
        mode=mode.value,
        server_time=math.nan,
        client_encrypt_time=math.nan,
        client_decrypt_time=math.nan,
        bytes_up=0,
        bytes_down=0,
        model_bits_plaintext=size,
        model_bits_ciphertext=size * pk.ciphertext_len * 8,
        worker_count=workers,
        timestamp=time.time(),
    )
    try:
        t0 = time.perf_counter()
        q = protocol.client_prepare_query(pk, sk, a, mode)
        enc_time = time.perf_counter() - t0
        up_frame = wire.encode_frame(wire.query_message(q))
        q_server = wire.parse_query(wire.WireMessage.from_bytes(up_frame[4:]))

        server_times = []
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            r = protocol.server_eval(q_server, b, workers=workers)
            server_times.append(time.perf_counter() - t0)
        down_frame = wire.encode_frame(wire.response_message(r, pk))
        r_client = wire.parse_response(wire.WireMessage.from_bytes(down_frame[4:]), pk)

        t0 = time.perf_counter()
        if mode is Mode.FULL:
            got = protocol.client_decode_full(sk, r_client).bits
            expected = a.bits & b.bits
            correct = bool(np.array_equal(got, expected))
        else:
            got = protocol.client_decode_cardinality(sk, r_client)
            correct = got == int((a.bits & b.bits).sum())
        dec_time = time.perf_counter() - t0
    except Exception as exc:  # per-cell failures go into the CSV
        result.ok = False
        result.error = f"{type(exc).__name__}: {exc}"
        return result

    result.bytes_up = len(up_frame)
    result.bytes_down = len(down_frame)
    if not correct:
        result.ok = False
        result.error = "oracle mismatch"
        return result
    result.server_time = min(server_times)
    result.client_encrypt_time = enc_time
    result.client_decrypt_time = dec_time
    return result


def run_bench(
    sizes: Sequence[int],
    bits_list: Sequence[int],
    modes: Sequence[Mode],
    *,
    workers: int = 1,
    repeats: int = 1,
    seed: int | None = 0,
    progress=None,
) -> list[BenchResult]:
    results = []
    for bits in bits_list:
        keypair = paillier.keygen(bits)
        for mode in modes:
            for size in sizes:
                res = run_cell(size, keypair, mode, seed=seed, workers=workers, repeats=repeats)
                results.append(res)
                if progress:
                    progress(res)
    return results


def write_csv(results: Iterable[BenchResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for r in results:
            writer.writerow(asdict(r))


def _index(results):
    return {(r.mode, r.key_bits, r.set_size): r for r in results if r.ok}


def trend_summary(results: Sequence[BenchResult]) -> list[dict]:
    """Server-time ratios for each size doubling and each key-width doubling."""
    idx = _index(results)
    rows = []
    for (mode, bits, size), r in sorted(idx.items()):
        nxt = idx.get((mode, bits, size * 2))
        if nxt and r.server_time > 0:
            rows.append({"kind": "size x2", "mode": mode, "key_bits": bits, "set_size": size,
                         "ratio": nxt.server_time / r.server_time})
        wider = idx.get((mode, bits * 2, size))
        if wider and r.server_time > 0:
            rows.append({"kind": "bits x2", "mode": mode, "key_bits": bits, "set_size": size,
                         "ratio": wider.server_time / r.server_time})
    return rows


def trend_checks(results: Sequence[BenchResult], mode: str = "FULL") -> list[tuple[str, float, tuple, bool]]:
    """Compare local server-time ratios with their expected bands:
    2**11 vs 2**10 at 512 bits, and 1024 vs 512 bits at 2**10."""
    idx = _index(results)
    checks = []
    pairs = [
        ("size 2^11/2^10 @512", (mode, 512, 1 << 11), (mode, 512, 1 << 10), SIZE_DOUBLING_BAND),
        ("bits 1024/512 @2^10", (mode, 1024, 1 << 10), (mode, 512, 1 << 10), BITS_DOUBLING_BAND),
    ]
    for name, top, bottom, band in pairs:
        if top in idx and bottom in idx:
            ratio = idx[top].server_time / idx[bottom].server_time
            checks.append((name, ratio, band, band[0] <= ratio <= band[1]))
    return checks


def format_table(results: Sequence[BenchResult]) -> str:
    lines = [f"{'mode':<12}{'bits':>6}{'size':>8}{'server s':>11}{'enc s':>9}{'dec s':>9}{'up B':>11}{'down B':>11}  ok"]
    for r in results:
        lines.append(
            f"{r.mode:<12}{r.key_bits:>6}{r.set_size:>8}{r.server_time:>11.4f}{r.client_encrypt_time:>9.3f}"
            f"{r.client_decrypt_time:>9.3f}{r.bytes_up:>11}{r.bytes_down:>11}  {'yes' if r.ok else r.error}"
        )
    return "\n".join(lines)
