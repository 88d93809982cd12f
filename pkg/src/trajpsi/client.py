"""Client side of the wire protocol."""
from __future__ import annotations

import socket
from dataclasses import dataclass

from . import protocol, wire
from .grid import TrajectoryBitVector
from .paillier import Ciphertext, PrivateKey, PublicKey
from .protocol import Mode
from .wire import WireMessage


class ServerError(RuntimeError):
    """The server replied with an ERROR message."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


def parse_address(addr: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class Connection:
    """A framed connection that counts bytes on the wire, headers included."""

    def __init__(self, addr, timeout: float | None = 60.0):
        self.sock = socket.create_connection(parse_address(addr), timeout=timeout)
        self.bytes_up = 0
        self.bytes_down = 0

    def request(self, msg: WireMessage) -> WireMessage:
        self.bytes_up += wire.write_frame(self.sock, msg)
        data = wire.read_frame(self.sock)
        if data is None:
            raise ConnectionError("server closed the connection")
        self.bytes_down += 4 + len(data)
        reply = WireMessage.from_bytes(data)
        if reply.type == "ERROR":
            raise ServerError(reply.body.get("code", "INTERNAL"), reply.body.get("message", ""))
        return reply

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class QueryResult:
    mode: Mode
    intersection: TrajectoryBitVector | None
    count: int
    bytes_up: int
    bytes_down: int


def query(addr, pk: PublicKey, sk: PrivateKey, v: TrajectoryBitVector, mode=Mode.FULL, rng=None) -> QueryResult:
    mode = Mode(mode)
    q = protocol.client_prepare_query(pk, sk, v, mode, rng)
    with Connection(addr) as conn:
        r = wire.parse_response(conn.request(wire.query_message(q)), pk)
        up, down = conn.bytes_up, conn.bytes_down
    if mode is Mode.FULL:
        inter = protocol.client_decode_full(sk, r)
        return QueryResult(mode, inter, inter.popcount(), up, down)
    return QueryResult(mode, None, protocol.client_decode_cardinality(sk, r), up, down)


def ingest(addr, token: str, v: TrajectoryBitVector) -> dict:
    with Connection(addr) as conn:
        return conn.request(wire.ingest_message(token, v)).body


def publish_key(addr, pk: PublicKey | bytes) -> bytes:
    with Connection(addr) as conn:
        return bytes.fromhex(conn.request(wire.keys_put_message(pk)).body["key_id"])


def fetch_key_bytes(addr, key_id: bytes) -> bytes:
    with Connection(addr) as conn:
        _, raw = wire.parse_keys_put(conn.request(wire.keys_get_message(key_id)))
    return raw


def fetch_key(addr, key_id: bytes) -> PublicKey:
    return PublicKey.from_bytes(fetch_key_bytes(addr, key_id))


def fetch_published_vector(addr) -> tuple[PublicKey, str, list[Ciphertext]]:
    with Connection(addr) as conn:
        return wire.parse_vector(conn.request(WireMessage("VECTOR_GET")))


def request_decrypt(addr, client: str, pk: PublicKey, cs) -> list[int]:
    with Connection(addr) as conn:
        return wire.parse_decrypt_resp(conn.request(wire.decrypt_req_message(client, pk, cs)))


def blinded_query(addr, client: str, v: TrajectoryBitVector, mode=Mode.CARDINALITY, rng=None):
    """On-device evaluation against a decryption server's published vector.

    Returns the unblinded count (CARDINALITY) or intersection vector (FULL).
    """
    pk, grid_id, published = fetch_published_vector(addr)
    if grid_id != v.grid_id:
        raise ServerError("BAD_GRID", "published vector uses a different grid")
    response, state = protocol.client_eval_blinded(pk, published, v, mode, rng)
    values = request_decrypt(addr, client, pk, response.payload)
    return protocol.client_unblind(state, values)
