import base64
import json
import logging
import random
import subprocess
import sys
import threading

import numpy as np
import pytest

from trajpsi import client, paillier, protocol, wire
from trajpsi.grid import GridSpec, TrajectoryBitVector as V, grid_id_for_length
from trajpsi.protocol import Mode
from trajpsi.server import (
    PsiServer,
    RateLimiter,
    ServerConfig,
    ServerState,
    dispatch,
    handle_bytes,
    ingest_infected,
    key_exchange_get,
    key_exchange_put,
)
from trajpsi.wire import WireError, WireMessage

TOKEN = "health-authority"
LENGTH = 64


def make_state(role="QUERY_SERVER", **kw):
    kw.setdefault("vector_length", LENGTH)
    kw.setdefault("ingest_token", TOKEN)
    if role == "KEY_EXCHANGE":
        kw.pop("vector_length")
    if role == "DECRYPT_SERVER":
        kw.setdefault("key_bits", 256)
    return ServerState(ServerConfig(role=role, **kw))


def rand_vec(rng, n=LENGTH):
    return V([rng.getrandbits(1) for _ in range(n)])


def query_msg(keys, v, mode=Mode.FULL):
    pk, sk = keys
    return wire.query_message(protocol.client_prepare_query(pk, sk, v, mode))


# -- ingestion --------------------------------------------------------------

def test_ingest_examples():
    rng = random.Random(1)
    state = make_state()
    v = rand_vec(rng)
    ingest_infected(state, v)
    assert state.infected_vector == v
    ingest_infected(state, v)
    assert state.infected_vector == v

    state = make_state()
    vs = [rand_vec(rng) for _ in range(5)]
    counts = []
    for x in vs:
        ingest_infected(state, x)
        counts.append(state.infected_vector.popcount())
    assert counts == sorted(counts)
    expected = np.bitwise_or.reduce([x.bits for x in vs])
    assert state.infected_vector.popcount() == int(expected.sum())


def test_ingest_message_auth_and_grid():
    state = make_state()
    v = rand_vec(random.Random(2))
    assert dispatch(state, wire.ingest_message("wrong", v)).body["code"] == "UNAUTHORIZED"
    assert dispatch(state, wire.ingest_message(TOKEN, V([1] * 3))).body["code"] == "BAD_GRID"
    assert dispatch(state, wire.ingest_message(TOKEN, v)).type == "ACK"
    assert state.infected_vector == v


# -- queries ----------------------------------------------------------------

def test_query_then_rate_limited(keys256):
    pk, sk = keys256
    state = make_state()
    ingest_infected(state, V([1, 0] * 32))
    a = V([1, 1] * 32)
    reply = dispatch(state, query_msg(keys256, a))
    assert reply.type == "RESPONSE"
    got = protocol.client_decode_full(sk, wire.parse_response(reply, pk))
    assert got.tolist() == [1, 0] * 32
    reply = dispatch(state, query_msg(keys256, a))
    assert reply.type == "ERROR" and reply.body["code"] == "RATE_LIMITED"


def test_query_errors(keys256):
    state = make_state()
    assert dispatch(state, query_msg(keys256, V([1] * 3))).body["code"] == "BAD_GRID"
    bad = WireMessage("QUERY", {"mode": "FULL"})
    assert dispatch(state, bad).body["code"] == "MALFORMED"
    state = make_state(modes=("CARDINALITY",))
    assert dispatch(state, query_msg(keys256, V([1] * LENGTH))).body["code"] == "UNSUPPORTED"


def test_errors_do_not_consume_quota(keys256):
    state = make_state()
    dispatch(state, query_msg(keys256, V([1] * 3)))
    assert dispatch(state, query_msg(keys256, V([1] * LENGTH))).type == "RESPONSE"


def test_unknown_type_gets_error_reply():
    state = make_state()
    reply = WireMessage.from_bytes(handle_bytes(state, b'{"v":1,"type":"HELLO","body":{}}'))
    assert reply.type == "ERROR" and reply.body["code"] == "UNSUPPORTED"
    reply = WireMessage.from_bytes(handle_bytes(state, b"not json"))
    assert reply.body["code"] == "MALFORMED"


def test_role_separation(keys256):
    kx = make_state("KEY_EXCHANGE")
    assert kx.infected_vector is None and kx.published is None
    for msg in (query_msg(keys256, V([1] * LENGTH)), wire.ingest_message(TOKEN, V([1] * LENGTH)),
                WireMessage("VECTOR_GET")):
        reply = dispatch(kx, msg)
        assert reply.type == "ERROR" and reply.body["code"] == "UNSUPPORTED"
    qs = make_state()
    assert dispatch(qs, wire.keys_get_message(b"\0" * 8)).body["code"] == "UNSUPPORTED"


# -- rate limiter -----------------------------------------------------------

def test_rate_limiter_window():
    now = [0.0]
    rl = RateLimiter(quota=2, window=100, clock=lambda: now[0])
    assert rl.try_acquire("QUERY", "a") and rl.try_acquire("QUERY", "a")
    assert not rl.try_acquire("QUERY", "a")
    assert rl.try_acquire("QUERY", "b")
    assert rl.try_acquire("DECRYPT", "a")
    now[0] = 99.9
    assert not rl.try_acquire("QUERY", "a")
    now[0] = 100
    assert rl.try_acquire("QUERY", "a")


def test_rate_limiter_ledger_text_round_trip():
    rl = RateLimiter(quota=3, clock=lambda: 5.0)
    rl.try_acquire("QUERY", "abc")
    rl.try_acquire("DECRYPT", "tok")
    text = rl.dumps()
    assert text == "DECRYPT tok 5.0 1\nQUERY abc 5.0 1\n"
    rl2 = RateLimiter(quota=3, clock=lambda: 5.0)
    rl2.loads(text)
    assert rl2.snapshot() == rl.snapshot()


def test_rate_limiter_concurrent():
    for _ in range(50):
        rl = RateLimiter(quota=3)
        barrier = threading.Barrier(20)
        results = []

        def worker():
            barrier.wait()
            results.append(rl.try_acquire("QUERY", "k"))

        threads = [threading.Thread(target=worker) for _ in range(20)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sum(results) == 3


# -- decryption server ------------------------------------------------------

def test_decrypt_server_blinded_flow():
    rng = random.Random(3)
    state = make_state("DECRYPT_SERVER", modes=("CARDINALITY",), quota=1)
    b = rand_vec(rng)
    ingest_infected(state, b)
    pk, grid_id, published = wire.parse_vector(dispatch(state, WireMessage("VECTOR_GET")))
    assert grid_id == state.grid_id and len(published) == LENGTH
    a = rand_vec(rng)
    resp, blind = protocol.client_eval_blinded(pk, published, a, Mode.CARDINALITY, rng)
    reply = dispatch(state, wire.decrypt_req_message("alice", pk, resp.payload))
    (value,) = wire.parse_decrypt_resp(reply)
    assert protocol.client_unblind(blind, value) == int((a.bits & b.bits).sum())
    again = dispatch(state, wire.decrypt_req_message("alice", pk, resp.payload))
    assert again.body["code"] == "RATE_LIMITED"
    other = dispatch(state, wire.decrypt_req_message("bob", pk, resp.payload))
    assert other.type == "DECRYPT_RESP"


def test_decrypt_server_limits_batch_size():
    state = make_state("DECRYPT_SERVER", modes=("CARDINALITY",))
    pk, _, published = wire.parse_vector(dispatch(state, WireMessage("VECTOR_GET")))
    reply = dispatch(state, wire.decrypt_req_message("eve", pk, published))
    assert reply.body["code"] == "MALFORMED"


def test_decrypt_server_full_mode():
    rng = random.Random(4)
    state = make_state("DECRYPT_SERVER", modes=("FULL", "CARDINALITY"))
    b = rand_vec(rng)
    ingest_infected(state, b)
    pk, _, published = wire.parse_vector(dispatch(state, WireMessage("VECTOR_GET")))
    a = rand_vec(rng)
    resp, blind = protocol.client_eval_blinded(pk, published, a, Mode.FULL, rng)
    values = wire.parse_decrypt_resp(dispatch(state, wire.decrypt_req_message("c", pk, resp.payload)))
    assert protocol.client_unblind(blind, values) == V(a.bits & b.bits)


def test_decrypt_key_mismatch(keys256):
    state = make_state("DECRYPT_SERVER")
    pk, _ = keys256
    reply = dispatch(state, wire.decrypt_req_message("c", pk, [paillier.encrypt(pk, 1)]))
    assert reply.body["code"] == "KEY_MISMATCH"


# -- key exchange -----------------------------------------------------------

def test_key_exchange_put_get(keys256, keys512):
    state = make_state("KEY_EXCHANGE")
    raw = keys256[0].to_bytes()
    kid = key_exchange_put(state, raw)
    assert key_exchange_get(state, kid) == raw
    assert key_exchange_put(state, raw) == kid
    with pytest.raises(WireError) as err:
        key_exchange_get(state, keys512[0].key_id)
    assert err.value.code == "NOT_FOUND"
    state.key_registry[keys512[0].key_id] = b"something else"
    with pytest.raises(WireError) as err:
        key_exchange_put(state, keys512[0].to_bytes())
    assert err.value.code == "CONFLICT"


def test_key_exchange_messages(keys256):
    state = make_state("KEY_EXCHANGE")
    ack = dispatch(state, wire.keys_put_message(keys256[0]))
    assert ack.type == "ACK"
    reply = dispatch(state, wire.keys_get_message(bytes.fromhex(ack.body["key_id"])))
    assert wire.parse_keys_put(reply)[1] == keys256[0].to_bytes()
    assert dispatch(state, wire.keys_get_message(b"\1" * 8)).body["code"] == "NOT_FOUND"


# -- persistence ------------------------------------------------------------

def test_snapshot_restore(tmp_path, keys256):
    rng = random.Random(5)
    state = make_state(state_dir=str(tmp_path))
    v = rand_vec(rng)
    ingest_infected(state, v)
    assert dispatch(state, query_msg(keys256, v)).type == "RESPONSE"
    restarted = make_state(state_dir=str(tmp_path))
    assert restarted.infected_vector == v
    assert dispatch(restarted, query_msg(keys256, v)).body["code"] == "RATE_LIMITED"

    kx = make_state("KEY_EXCHANGE", state_dir=str(tmp_path / "kx"))
    kid = key_exchange_put(kx, keys256[0].to_bytes())
    assert key_exchange_get(make_state("KEY_EXCHANGE", state_dir=str(tmp_path / "kx")), kid) == keys256[0].to_bytes()


def test_decrypt_server_reuses_key_dir(tmp_path):
    s1 = make_state("DECRYPT_SERVER", key_dir=str(tmp_path / "keys"))
    s2 = make_state("DECRYPT_SERVER", key_dir=str(tmp_path / "keys"))
    assert s1.keypair[0] == s2.keypair[0]


def test_config_from_file(tmp_path):
    spec = GridSpec(0, 1, 0, 1, 0.5, 0, 300, 4)
    spec.save(tmp_path / "grid.txt")
    (tmp_path / "server.json").write_text(json.dumps({
        "listen": "127.0.0.1:0", "role": "QUERY_SERVER", "grid": "grid.txt",
        "quota": 2, "window": 60, "ingest_token": "t", "state_dir": "state",
    }))
    cfg = ServerConfig.from_file(tmp_path / "server.json")
    assert cfg.port == 0 and cfg.quota == 2
    state = ServerState(cfg)
    assert state.grid_id == spec.grid_id and state.length == 16
    (tmp_path / "bad.json").write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ValueError):
        ServerConfig.from_file(tmp_path / "bad.json")


# -- over the network -------------------------------------------------------

@pytest.fixture
def running():
    servers = []

    def start(state):
        srv = PsiServer(state, ("127.0.0.1", 0))
        srv.start_background()
        servers.append(srv)
        return "%s:%d" % srv.address

    yield start
    for srv in servers:
        srv.shutdown()
        srv.server_close()


def test_loopback_end_to_end(running, keys256):
    rng = random.Random(6)
    state = make_state(quota=5)
    addr = running(state)
    b1, b2 = rand_vec(rng), rand_vec(rng)
    client.ingest(addr, TOKEN, b1)
    client.ingest(addr, TOKEN, b2)
    infected = b1.bits | b2.bits
    pk, sk = keys256
    a = rand_vec(rng)
    res = client.query(addr, pk, sk, a, Mode.FULL)
    assert np.array_equal(res.intersection.bits, a.bits & infected)
    res = client.query(addr, pk, sk, a, Mode.CARDINALITY)
    assert res.count == int((a.bits & infected).sum())
    with pytest.raises(client.ServerError) as err:
        client.ingest(addr, "nope", b1)
    assert err.value.code == "UNAUTHORIZED"


def test_transcript_never_contains_plaintext(running, keys256, caplog):
    """Neither the client's vector nor the infected vector shows up in any
    server log line, reply or error."""
    rng = random.Random(7)
    n = 256
    state = make_state(vector_length=n, quota=1)
    addr = running(state)
    infected = rand_vec(rng, n)
    client.ingest(addr, TOKEN, infected)
    a = rand_vec(rng, n)
    pk, sk = keys256

    transcript = []
    caplog.set_level(logging.DEBUG)
    q = protocol.client_prepare_query(pk, sk, a, Mode.FULL)
    with client.Connection(addr) as conn:
        for msg in (wire.query_message(q), wire.query_message(q), WireMessage("QUERY", {"junk": 1})):
            wire.write_frame(conn.sock, msg)
            transcript.append(wire.read_frame(conn.sock))
    transcript.append(caplog.text.encode())
    blob = b"\n".join(transcript)
    for v in (a, infected):
        packed = v.packed()
        for needle in (packed, packed.hex().encode(), base64.b64encode(packed), "".join(map(str, v.tolist())).encode()):
            assert needle not in blob
    assert b"RATE_LIMITED" in blob


KX_GET_SCRIPT = """
import sys
from trajpsi import client, paillier
raw = client.fetch_key_bytes(sys.argv[1], bytes.fromhex(sys.argv[2]))
sys.stdout.write(raw.hex() + "\\n")
pk = paillier.PublicKey.from_bytes(raw)
c = paillier.encrypt(pk, int(sys.argv[3]))
sys.stdout.write(c.to_bytes(pk).hex() + "\\n")
"""


def test_cross_process_key_exchange(tmp_path, keys256):
    (tmp_path / "kx.json").write_text(json.dumps({"listen": "127.0.0.1:0", "role": "KEY_EXCHANGE"}))
    # port 0 is resolved after bind; run the server in a child and read its banner
    proc = subprocess.Popen([sys.executable, "-m", "trajpsi", "serve", str(tmp_path / "kx.json")],
                            stdout=subprocess.PIPE, text=True)
    try:
        banner = proc.stdout.readline()
        addr = banner.rsplit(" ", 1)[-1].strip()
        pk, sk = keys256
        kid = client.publish_key(addr, pk)
        out = subprocess.run([sys.executable, "-c", KX_GET_SCRIPT, addr, kid.hex(), "31337"],
                             capture_output=True, text=True, check=True).stdout.split()
        assert bytes.fromhex(out[0]) == pk.to_bytes()
        c = paillier.Ciphertext.from_bytes(pk, bytes.fromhex(out[1]))
        assert paillier.decrypt(sk, c) == 31337
        with pytest.raises(client.ServerError) as err:
            client.query(addr, pk, sk, V([1, 0]), Mode.FULL)
        assert err.value.code == "UNSUPPORTED"
    finally:
        proc.terminate()
        proc.wait(10)


def test_default_modes_by_role():
    assert ServerConfig(role="QUERY_SERVER", vector_length=4).modes == ("FULL", "CARDINALITY")
    assert ServerConfig(role="DECRYPT_SERVER", vector_length=4).modes == ("CARDINALITY",)
    state = make_state("DECRYPT_SERVER")
    pk, _, published = wire.parse_vector(dispatch(state, WireMessage("VECTOR_GET")))
    assert dispatch(state, wire.decrypt_req_message("x", pk, published[:2])).body["code"] == "MALFORMED"
