"""Query server, decryption server and key-exchange directory.

One process plays one role:

``QUERY_SERVER``
    holds the aggregated infected vector in plaintext (ingested by the health
    authority) and answers encrypted ``QUERY`` messages.
``DECRYPT_SERVER``
    holds its own key pair, publishes its infected vector encrypted under it
    (``VECTOR_GET``) and decrypts blinded on-device results (``DECRYPT_REQ``).
``KEY_EXCHANGE``
    a public-key directory (``KEYS_PUT`` / ``KEYS_GET``); it never stores
    ciphertexts or trajectories.

Queries and decryptions are rate limited per identity: the key id of the
query key, or the client token of a decryption request. Identities are
self-asserted and can be spoofed by minting new keys or tokens.
"""
from __future__ import annotations

import hmac
import json
import logging
import os
import socketserver
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import paillier, wire
from .grid import GridSpec, TrajectoryBitVector, grid_id_for_length, merge_or
from .paillier import Ciphertext, PaillierError, PrivateKey, PublicKey
from .protocol import Mode, server_eval
from .wire import WireError, WireMessage, error_message

log = logging.getLogger(__name__)

ROLES = ("QUERY_SERVER", "DECRYPT_SERVER", "KEY_EXCHANGE")
DAY = 24 * 3600

ROLE_TYPES = {
    "QUERY_SERVER": {"QUERY", "INGEST"},
    "DECRYPT_SERVER": {"INGEST", "VECTOR_GET", "DECRYPT_REQ"},
    "KEY_EXCHANGE": {"KEYS_PUT", "KEYS_GET"},
}


class ConfigError(ValueError):
    pass


@dataclass
class ServerConfig:
    role: str = "QUERY_SERVER"
    host: str = "127.0.0.1"
    port: int = 7878
    grid_path: str | None = None
    vector_length: int | None = None
    key_bits: int = 1024
    key_dir: str | None = None
    quota: int = 1
    window: float = DAY
    ingest_token: str | None = None
    # None: both modes, except a decryption server, which only decrypts counts
    modes: tuple[str, ...] | None = None
    state_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}")
        if self.quota < 1 or self.window <= 0:
            raise ConfigError("quota and window must be positive")
        if self.modes is None:
            self.modes = ("CARDINALITY",) if self.role == "DECRYPT_SERVER" else ("FULL", "CARDINALITY")
        self.modes = tuple(Mode(m).value for m in self.modes)

    @classmethod
    def from_file(cls, path) -> "ServerConfig":
        """Load a JSON config. ``listen`` is ``host:port``; relative paths are
        resolved against the config file's directory."""
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        kwargs = {}
        if "listen" in raw:
            host, _, port = str(raw.pop("listen")).rpartition(":")
            kwargs["host"], kwargs["port"] = host or "127.0.0.1", int(port)
        if "grid" in raw:
            raw["grid_path"] = raw.pop("grid")
        for key in ("grid_path", "key_dir", "state_dir"):
            if raw.get(key):
                raw[key] = str((base / raw[key]).resolve())
        if "modes" in raw:
            raw["modes"] = tuple(raw["modes"])
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw, **kwargs)

    def grid_identity(self) -> tuple[str, int, GridSpec | None]:
        if self.grid_path:
            spec = GridSpec.load(self.grid_path)
            return spec.grid_id, spec.total_cells, spec
        if self.vector_length:
            return grid_id_for_length(self.vector_length), self.vector_length, None
        raise ConfigError("config needs either a grid path or a vector_length")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class RateLimiter:
    """Fixed-window quota per ``(kind, identity)``; check-and-increment is atomic."""

    def __init__(self, quota: int = 1, window: float = DAY, clock: Callable[[], float] = time.time,
                 on_change: Callable[[str], None] | None = None):
        self.quota = quota
        self.window = window
        self.clock = clock
        self.on_change = on_change
        self._lock = threading.Lock()
        self._ledger: dict[tuple[str, str], list] = {}

    def try_acquire(self, kind: str, identity: str) -> bool:
        now = self.clock()
        with self._lock:
            entry = self._ledger.get((kind, identity))
            if entry is None or now - entry[0] >= self.window:
                entry = [now, 0]
                self._ledger[(kind, identity)] = entry
            if entry[1] >= self.quota:
                return False
            entry[1] += 1
            if self.on_change:
                self.on_change(self._render())
            return True

    def snapshot(self) -> dict[tuple[str, str], tuple[float, int]]:
        with self._lock:
            return {k: (v[0], v[1]) for k, v in self._ledger.items()}

    def _render(self) -> str:
        return "".join(
            f"{kind} {ident} {start!r} {count}\n"
            for (kind, ident), (start, count) in sorted(self._ledger.items())
        )

    def dumps(self) -> str:
        """Ledger text: one ``kind identity window_start count`` line per entry."""
        with self._lock:
            return self._render()

    def loads(self, text: str) -> None:
        ledger = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            kind, ident, start, count = line.split()
            ledger[(kind, ident)] = [float(start), int(count)]
        with self._lock:
            self._ledger = ledger


class ServerState:
    """Everything a server process holds. Vector updates replace the reference
    under a lock, so readers always evaluate against one consistent snapshot."""

    def __init__(self, config: ServerConfig, *, clock: Callable[[], float] = time.time, rng=None):
        self.config = config
        self.rng = rng
        self.grid_id: str | None = None
        self.length = 0
        self.grid: GridSpec | None = None
        self.infected_vector: TrajectoryBitVector | None = None
        self.keypair: tuple[PublicKey, PrivateKey] | None = None
        self.published: list[Ciphertext] | None = None
        self.key_registry: dict[bytes, bytes] = {}
        self._write_lock = threading.Lock()
        self.state_dir = Path(config.state_dir) if config.state_dir else None
        if self.state_dir:
            self.state_dir.mkdir(parents=True, exist_ok=True)
        self.limiter = RateLimiter(config.quota, config.window, clock, self._save_ledger)

        if config.role != "KEY_EXCHANGE":
            self.grid_id, self.length, self.grid = config.grid_identity()
            self.infected_vector = TrajectoryBitVector.zeros(self.length, self.grid_id)
        if config.role == "DECRYPT_SERVER":
            self.keypair = _load_or_create_keypair(config)
        self._restore()
        if config.role == "DECRYPT_SERVER":
            self._republish()

    # -- persistence --------------------------------------------------------
    def _restore(self) -> None:
        if not self.state_dir:
            return
        vec = self.state_dir / "infected.tbv"
        if vec.exists() and self.infected_vector is not None:
            v = TrajectoryBitVector.load(vec)
            if v.grid_id == self.grid_id and len(v) == self.length:
                self.infected_vector = v
            else:
                log.warning("ignoring infected snapshot for a different grid")
        ledger = self.state_dir / "ledger.txt"
        if ledger.exists():
            self.limiter.loads(ledger.read_text(encoding="utf-8"))
        keys = self.state_dir / "keys.txt"
        if keys.exists():
            for line in keys.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    kid, raw = line.split()
                    self.key_registry[bytes.fromhex(kid)] = wire.unb64(raw)

    def _save_ledger(self, text: str) -> None:
        # runs under the limiter lock, so writes are serialized
        if self.state_dir:
            _atomic_write(self.state_dir / "ledger.txt", text.encode())

    def _save_vector(self) -> None:
        if self.state_dir and self.infected_vector is not None:
            _atomic_write(self.state_dir / "infected.tbv", self.infected_vector.to_bytes())

    def _save_keys(self) -> None:
        if self.state_dir:
            text = "".join(f"{k.hex()} {wire.b64(v)}\n" for k, v in sorted(self.key_registry.items()))
            _atomic_write(self.state_dir / "keys.txt", text.encode())

    def _republish(self) -> None:
        pk, sk = self.keypair
        self.published = paillier.batch_encrypt_fast(sk, pk, self.infected_vector.tolist(), self.rng)


def _load_or_create_keypair(config: ServerConfig) -> tuple[PublicKey, PrivateKey]:
    if config.key_dir:
        d = Path(config.key_dir)
        if (d / "private.key").exists():
            sk = PrivateKey.from_bytes((d / "private.key").read_bytes())
            return sk.public_key, sk
    pk, sk = paillier.keygen(config.key_bits)
    if config.key_dir:
        d = Path(config.key_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "public.key").write_bytes(pk.to_bytes())
        (d / "private.key").write_bytes(sk.to_bytes())
    return pk, sk


# -- operations -------------------------------------------------------------

def ingest_infected(state: ServerState, v: TrajectoryBitVector) -> ServerState:
    """OR an infected trajectory into the server vector (bits never clear)."""
    with state._write_lock:
        merged = merge_or(state.infected_vector, v)
        changed = merged != state.infected_vector
        state.infected_vector = merged
        if changed:
            state._save_vector()
            if state.keypair is not None:
                state._republish()
    return state


def handle_ingest(state: ServerState, msg: WireMessage) -> WireMessage:
    token, v = wire.parse_ingest(msg)
    expected = state.config.ingest_token
    if not expected or not hmac.compare_digest(token.encode(), expected.encode()):
        return error_message("UNAUTHORIZED", "ingestion token rejected")
    if v.grid_id != state.grid_id or len(v) != state.length:
        return error_message("BAD_GRID", "vector does not match the server grid")
    ingest_infected(state, v)
    return wire.ack_message(status="ingested")


def handle_query(state: ServerState, msg: WireMessage) -> WireMessage:
    q = wire.parse_query(msg)
    if q.mode.value not in state.config.modes:
        return error_message("UNSUPPORTED", f"mode {q.mode.value} is disabled")
    if q.grid_id != state.grid_id or len(q) != state.length:
        return error_message("BAD_GRID", "query does not match the server grid")
    if not state.limiter.try_acquire("QUERY", q.pk.key_id.hex()):
        return error_message("RATE_LIMITED", "query quota exhausted for this key")
    snapshot = state.infected_vector
    r = server_eval(q, snapshot, state.rng, workers=state.config.workers)
    return wire.response_message(r, q.pk)


def handle_vector_get(state: ServerState, msg: WireMessage) -> WireMessage:
    pk, _ = state.keypair
    return wire.vector_message(pk, state.grid_id, state.published)


def handle_decrypt(state: ServerState, msg: WireMessage) -> WireMessage:
    pk, sk = state.keypair
    client, cs = wire.parse_decrypt_req(msg, pk)
    # without FULL mode only a single blinded count may be decrypted per request
    limit = state.length if "FULL" in state.config.modes else 1
    if not 1 <= len(cs) <= limit:
        return error_message("MALFORMED", f"expected between 1 and {limit} ciphertexts")
    if not state.limiter.try_acquire("DECRYPT", client):
        return error_message("RATE_LIMITED", "decryption quota exhausted for this client")
    try:
        values = [paillier.decrypt(sk, c) for c in cs]
    except PaillierError as exc:
        return error_message("MALFORMED", str(exc))
    return wire.decrypt_resp_message(values, pk)


def key_exchange_put(state: ServerState, raw: bytes) -> bytes:
    """Register a public key; returns its key id. Re-putting identical bytes is a no-op."""
    pk = PublicKey.from_bytes(raw)
    with state._write_lock:
        existing = state.key_registry.get(pk.key_id)
        if existing is not None and existing != raw:
            raise WireError("different key already registered under this id", "CONFLICT")
        if existing is None:
            state.key_registry[pk.key_id] = raw
            state._save_keys()
    return pk.key_id


def key_exchange_get(state: ServerState, key_id: bytes) -> bytes:
    raw = state.key_registry.get(key_id)
    if raw is None:
        raise WireError("unknown key id", "NOT_FOUND")
    return raw


def handle_keys_put(state: ServerState, msg: WireMessage) -> WireMessage:
    _, raw = wire.parse_keys_put(msg)
    kid = key_exchange_put(state, raw)
    return wire.ack_message(status="stored", key_id=kid.hex())


def handle_keys_get(state: ServerState, msg: WireMessage) -> WireMessage:
    return wire.keys_put_message(key_exchange_get(state, wire.parse_keys_get(msg)))


HANDLERS = {
    "QUERY": handle_query,
    "INGEST": handle_ingest,
    "VECTOR_GET": handle_vector_get,
    "DECRYPT_REQ": handle_decrypt,
    "KEYS_PUT": handle_keys_put,
    "KEYS_GET": handle_keys_get,
}


def dispatch(state: ServerState, msg: WireMessage) -> WireMessage:
    if msg.type not in ROLE_TYPES[state.config.role]:
        return error_message("UNSUPPORTED", f"{state.config.role} does not serve {msg.type}")
    try:
        return HANDLERS[msg.type](state, msg)
    except WireError as exc:
        return error_message(exc.code, str(exc))
    except ValueError as exc:
        return error_message("MALFORMED", str(exc))


def handle_bytes(state: ServerState, data: bytes) -> bytes:
    """Decode one request payload, dispatch it and encode the reply payload."""
    try:
        msg = WireMessage.from_bytes(data)
    except WireError as exc:
        reply = error_message(exc.code, str(exc))
    else:
        try:
            reply = dispatch(state, msg)
        except Exception:
            log.exception("unhandled error serving %s", msg.type)
            reply = error_message("INTERNAL", "internal server error")
        log.info("%s -> %s%s", msg.type, reply.type,
                 f" {reply.body.get('code')}" if reply.type == "ERROR" else "")
    return reply.to_bytes()


# -- transport --------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        state = self.server.state
        while True:
            try:
                data = wire.read_frame(self.request)
            except (ConnectionError, WireError):
                return
            if data is None:
                return
            try:
                wire.write_frame(self.request, handle_bytes(state, data))
            except OSError:
                return


class PsiServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, state: ServerState, address: tuple[str, int] | None = None):
        self.state = state
        super().__init__(address or (state.config.host, state.config.port), _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def serve(config: ServerConfig) -> None:
    state = ServerState(config)
    with PsiServer(state) as server:
        host, port = server.address
        log.info("%s listening on %s:%d", config.role, host, port)
        print(f"{config.role} listening on {host}:{port}", flush=True)
        server.serve_forever()
