"""Wire messages and length-prefixed framing.

A frame is a 4-byte big-endian length followed by that many bytes of UTF-8
JSON::

    {"v": 1, "type": "QUERY", "body": {...}}

Big integers never appear as JSON numbers. They are fixed-width big-endian
byte strings in padded base64; a run of ciphertexts is one base64 string of
concatenated fixed-width values. Body schemas, per message type:

``QUERY``
    ``key`` (public key encoding), ``mode``, ``grid_id``, ``ciphertexts``
``RESPONSE``
    ``mode``, ``grid_id``, ``key_id`` (hex), ``length`` (16 hex digits, so a
    cardinality reply has the same size for every vector length), ``payload``
``INGEST``
    ``token``, ``grid_id``, ``length``, ``bits`` (packed, little-endian bit order)
``KEYS_PUT``
    ``key``
``KEYS_GET``
    ``key_id`` (hex)
``DECRYPT_REQ``
    ``client``, ``key_id``, ``ciphertexts``
``DECRYPT_RESP``
    ``width`` (bytes per value), ``values``
``VECTOR_GET``
    empty
``VECTOR``
    ``key``, ``grid_id``, ``ciphertexts``
``ACK``
    free-form status fields
``ERROR``
    ``code``, ``message``
"""
from __future__ import annotations

import base64
import binascii
import json
import socket
import struct
from dataclasses import dataclass, field
from typing import Sequence

from .grid import TrajectoryBitVector
from .paillier import Ciphertext, PaillierError, PublicKey
from .protocol import EncryptedQuery, Mode, PsiResponse

__all__ = [
    "VERSION",
    "MESSAGE_TYPES",
    "ERROR_CODES",
    "WireMessage",
    "WireError",
    "encode_frame",
    "read_frame",
    "write_frame",
]

VERSION = 1
MAX_FRAME = 1 << 30

MESSAGE_TYPES = (
    "QUERY",
    "RESPONSE",
    "INGEST",
    "KEYS_GET",
    "KEYS_PUT",
    "DECRYPT_REQ",
    "DECRYPT_RESP",
    "VECTOR_GET",
    "VECTOR",
    "ACK",
    "ERROR",
)

ERROR_CODES = {
    "MALFORMED": "message could not be parsed or failed validation",
    "BAD_VERSION": "unsupported protocol version",
    "UNSUPPORTED": "message type not served by this role",
    "RATE_LIMITED": "quota for this identity is exhausted in the current window",
    "BAD_GRID": "grid id or vector length does not match the server grid",
    "KEY_MISMATCH": "ciphertexts are not under the expected key",
    "UNAUTHORIZED": "missing or wrong ingestion token",
    "NOT_FOUND": "unknown key id",
    "CONFLICT": "a different key is already registered under this id",
    "INTERNAL": "server error",
}


class WireError(ValueError):
    def __init__(self, message: str, code: str = "MALFORMED"):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class WireMessage:
    type: str
    body: dict = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        return json.dumps(
            {"v": self.version, "type": self.type, "body": self.body},
            separators=(",", ":"),
            sort_keys=True,
        ).encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> "WireMessage":
        try:
            obj = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise WireError(f"undecodable message: {exc}") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("body", {}), dict):
            raise WireError("message must be a JSON object with an object body")
        version = obj.get("v")
        if version != VERSION:
            raise WireError(f"unsupported version {version!r}", "BAD_VERSION")
        mtype = obj.get("type")
        if mtype not in MESSAGE_TYPES:
            raise WireError(f"unknown message type {mtype!r}", "UNSUPPORTED")
        return cls(mtype, obj.get("body", {}), version)

    def require(self, *types: str) -> None:
        if self.type not in types:
            raise WireError(f"expected {'/'.join(types)}, got {self.type}", "UNSUPPORTED")


# -- framing ----------------------------------------------------------------

def encode_frame(msg: WireMessage | bytes) -> bytes:
    payload = msg.to_bytes() if isinstance(msg, WireMessage) else msg
    if len(payload) > MAX_FRAME:
        raise WireError("frame too large")
    return struct.pack(">I", len(payload)) + payload


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    buf = bytearray()
    while len(buf) < size:
        chunk = sock.recv(min(size - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes | None:
    """Read one frame payload; None on clean EOF before a header."""
    first = sock.recv(4)
    if not first:
        return None
    header = first + (_recv_exact(sock, 4 - len(first)) if len(first) < 4 else b"")
    (size,) = struct.unpack(">I", header)
    if size > MAX_FRAME:
        raise WireError("frame too large")
    return _recv_exact(sock, size)


def write_frame(sock: socket.socket, msg: WireMessage | bytes) -> int:
    frame = encode_frame(msg)
    sock.sendall(frame)
    return len(frame)


# -- field codecs -----------------------------------------------------------

def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text) -> bytes:
    if not isinstance(text, str):
        raise WireError("expected a base64 string")
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise WireError(f"bad base64: {exc}") from None


def _get(body: dict, key: str, kind=None):
    if key not in body:
        raise WireError(f"missing field {key!r}")
    value = body[key]
    if kind is not None and (not isinstance(value, kind) or isinstance(value, bool)):
        raise WireError(f"field {key!r} has the wrong type")
    return value


def pack_ciphertexts(pk: PublicKey, cs: Sequence[Ciphertext]) -> str:
    width = pk.ciphertext_len
    return b64(b"".join(int(c.value).to_bytes(width, "big") for c in cs))


def unpack_ciphertexts(pk: PublicKey, text: str) -> list[Ciphertext]:
    raw = unb64(text)
    width = pk.ciphertext_len
    if len(raw) % width:
        raise WireError("ciphertext blob is not a whole number of ciphertexts")
    try:
        return [Ciphertext.from_bytes(pk, raw[i : i + width]) for i in range(0, len(raw), width)]
    except PaillierError as exc:
        raise WireError(str(exc)) from None


def decode_key(text: str) -> PublicKey:
    try:
        return PublicKey.from_bytes(unb64(text))
    except PaillierError as exc:
        raise WireError(f"bad public key: {exc}") from None


def decode_key_id(text) -> bytes:
    if not isinstance(text, str):
        raise WireError("key_id must be a hex string")
    try:
        kid = bytes.fromhex(text)
    except ValueError:
        raise WireError("key_id must be a hex string") from None
    if len(kid) != 8:
        raise WireError("key_id must be 8 bytes")
    return kid


def _mode(body: dict) -> Mode:
    try:
        return Mode(_get(body, "mode", str))
    except ValueError:
        raise WireError(f"unknown mode {body['mode']!r}") from None


# -- typed messages ---------------------------------------------------------

def query_message(q: EncryptedQuery) -> WireMessage:
    return WireMessage(
        "QUERY",
        {
            "key": b64(q.pk.to_bytes()),
            "mode": q.mode.value,
            "grid_id": q.grid_id,
            "ciphertexts": pack_ciphertexts(q.pk, q.ciphertexts),
        },
    )


def parse_query(msg: WireMessage) -> EncryptedQuery:
    msg.require("QUERY")
    b = msg.body
    pk = decode_key(_get(b, "key", str))
    return EncryptedQuery(pk, unpack_ciphertexts(pk, _get(b, "ciphertexts", str)), _get(b, "grid_id", str), _mode(b))


def response_message(r: PsiResponse, pk: PublicKey) -> WireMessage:
    return WireMessage(
        "RESPONSE",
        {
            "mode": r.mode.value,
            "grid_id": r.grid_id,
            "key_id": r.key_id.hex(),
            "length": f"{r.length:016x}",
            "payload": pack_ciphertexts(pk, r.payload),
        },
    )


def parse_response(msg: WireMessage, pk: PublicKey) -> PsiResponse:
    msg.require("RESPONSE")
    b = msg.body
    if decode_key_id(_get(b, "key_id")) != pk.key_id:
        raise WireError("response is under a different key", "KEY_MISMATCH")
    try:
        return PsiResponse(
            _mode(b),
            unpack_ciphertexts(pk, _get(b, "payload", str)),
            _get(b, "grid_id", str),
            pk.key_id,
            _fixed_length(_get(b, "length", str)),
        )
    except ValueError as exc:
        raise WireError(str(exc)) from None


def _fixed_length(text: str) -> int:
    if len(text) != 16 or any(ch not in "0123456789abcdef" for ch in text):
        raise WireError("length must be 16 lowercase hex digits")
    return int(text, 16)


def ingest_message(token: str, v: TrajectoryBitVector) -> WireMessage:
    return WireMessage(
        "INGEST",
        {"token": token, "grid_id": v.grid_id, "length": len(v), "bits": b64(v.packed())},
    )


def parse_ingest(msg: WireMessage) -> tuple[str, TrajectoryBitVector]:
    msg.require("INGEST")
    b = msg.body
    length = _get(b, "length", int)
    if length < 0:
        raise WireError("negative vector length")
    try:
        v = TrajectoryBitVector.from_packed(unb64(_get(b, "bits", str)), length, _get(b, "grid_id", str))
    except ValueError as exc:
        raise WireError(str(exc)) from None
    return _get(b, "token", str), v


def keys_put_message(pk: PublicKey | bytes) -> WireMessage:
    raw = pk.to_bytes() if isinstance(pk, PublicKey) else pk
    return WireMessage("KEYS_PUT", {"key": b64(raw)})


def parse_keys_put(msg: WireMessage) -> tuple[PublicKey, bytes]:
    msg.require("KEYS_PUT")
    raw = unb64(_get(msg.body, "key", str))
    try:
        return PublicKey.from_bytes(raw), raw
    except PaillierError as exc:
        raise WireError(f"bad public key: {exc}") from None


def keys_get_message(key_id: bytes) -> WireMessage:
    return WireMessage("KEYS_GET", {"key_id": key_id.hex()})


def parse_keys_get(msg: WireMessage) -> bytes:
    msg.require("KEYS_GET")
    return decode_key_id(_get(msg.body, "key_id"))


def decrypt_req_message(client: str, pk: PublicKey, cs: Sequence[Ciphertext]) -> WireMessage:
    return WireMessage(
        "DECRYPT_REQ",
        {"client": client, "key_id": pk.key_id.hex(), "ciphertexts": pack_ciphertexts(pk, cs)},
    )


def parse_decrypt_req(msg: WireMessage, pk: PublicKey) -> tuple[str, list[Ciphertext]]:
    msg.require("DECRYPT_REQ")
    b = msg.body
    client = _get(b, "client", str)
    if decode_key_id(_get(b, "key_id")) != pk.key_id:
        raise WireError("ciphertexts are under a different key", "KEY_MISMATCH")
    return client, unpack_ciphertexts(pk, _get(b, "ciphertexts", str))


def decrypt_resp_message(values: Sequence[int], pk: PublicKey) -> WireMessage:
    width = (pk.bits + 7) // 8
    blob = b"".join(int(v).to_bytes(width, "big") for v in values)
    return WireMessage("DECRYPT_RESP", {"width": width, "values": b64(blob)})


def parse_decrypt_resp(msg: WireMessage) -> list[int]:
    msg.require("DECRYPT_RESP")
    width = _get(msg.body, "width", int)
    raw = unb64(_get(msg.body, "values", str))
    if width <= 0 or len(raw) % width:
        raise WireError("value blob is not a whole number of values")
    return [int.from_bytes(raw[i : i + width], "big") for i in range(0, len(raw), width)]


def vector_message(pk: PublicKey, grid_id: str, cs: Sequence[Ciphertext]) -> WireMessage:
    return WireMessage(
        "VECTOR",
        {"key": b64(pk.to_bytes()), "grid_id": grid_id, "ciphertexts": pack_ciphertexts(pk, cs)},
    )


def parse_vector(msg: WireMessage) -> tuple[PublicKey, str, list[Ciphertext]]:
    msg.require("VECTOR")
    b = msg.body
    pk = decode_key(_get(b, "key", str))
    return pk, _get(b, "grid_id", str), unpack_ciphertexts(pk, _get(b, "ciphertexts", str))


def error_message(code: str, text: str) -> WireMessage:
    if code not in ERROR_CODES:
        code = "INTERNAL"
    return WireMessage("ERROR", {"code": code, "message": text})


def ack_message(**fields) -> WireMessage:
    return WireMessage("ACK", dict(fields))
