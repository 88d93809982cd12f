"""Random wire messages of every type, for round-trip checks."""
import random

from trajpsi import paillier, wire
from trajpsi.grid import TrajectoryBitVector, grid_id_for_length
from trajpsi.paillier import Ciphertext
from trajpsi.protocol import EncryptedQuery, Mode, PsiResponse


def random_ciphertexts(pk, rng, count):
    return [Ciphertext(rng.randrange(1, pk.n_squared), pk.key_id) for _ in range(count)]


def random_message(mtype, pk, rng):
    n = rng.randrange(0, 20)
    if mtype == "QUERY":
        q = EncryptedQuery(pk, random_ciphertexts(pk, rng, n), grid_id_for_length(n), rng.choice(list(Mode)))
        return wire.query_message(q)
    if mtype == "RESPONSE":
        mode = rng.choice(list(Mode))
        k = n if mode is Mode.FULL else 1
        r = PsiResponse(mode, random_ciphertexts(pk, rng, k), grid_id_for_length(n), pk.key_id, n)
        return wire.response_message(r, pk)
    if mtype == "INGEST":
        v = TrajectoryBitVector([rng.getrandbits(1) for _ in range(n)])
        return wire.ingest_message(f"tok{rng.getrandbits(32)}", v)
    if mtype == "KEYS_PUT":
        return wire.keys_put_message(pk)
    if mtype == "KEYS_GET":
        return wire.keys_get_message(rng.getrandbits(64).to_bytes(8, "big"))
    if mtype == "DECRYPT_REQ":
        return wire.decrypt_req_message(f"client-{rng.getrandbits(16)}", pk, random_ciphertexts(pk, rng, max(n, 1)))
    if mtype == "DECRYPT_RESP":
        return wire.decrypt_resp_message([rng.randrange(pk.n) for _ in range(n)], pk)
    if mtype == "VECTOR_GET":
        return wire.WireMessage("VECTOR_GET")
    if mtype == "VECTOR":
        return wire.vector_message(pk, grid_id_for_length(n), random_ciphertexts(pk, rng, n))
    if mtype == "ACK":
        return wire.ack_message(status="ok", key_id=rng.getrandbits(64).to_bytes(8, "big").hex())
    if mtype == "ERROR":
        code = rng.choice(sorted(wire.ERROR_CODES))
        return wire.error_message(code, f"detail {rng.random()}")
    raise ValueError(mtype)


def typed_round_trip(msg, pk):
    """Decode a message body into domain objects and re-encode it."""
    t = msg.type
    if t == "QUERY":
        return wire.query_message(wire.parse_query(msg))
    if t == "RESPONSE":
        return wire.response_message(wire.parse_response(msg, pk), pk)
    if t == "INGEST":
        return wire.ingest_message(*wire.parse_ingest(msg))
    if t == "KEYS_PUT":
        return wire.keys_put_message(wire.parse_keys_put(msg)[1])
    if t == "KEYS_GET":
        return wire.keys_get_message(wire.parse_keys_get(msg))
    if t == "DECRYPT_REQ":
        client, cs = wire.parse_decrypt_req(msg, pk)
        return wire.decrypt_req_message(client, pk, cs)
    if t == "DECRYPT_RESP":
        return wire.decrypt_resp_message(wire.parse_decrypt_resp(msg), pk)
    if t == "VECTOR":
        vpk, grid_id, cs = wire.parse_vector(msg)
        return wire.vector_message(vpk, grid_id, cs)
    return msg
