"""Agent-to-cloud sync protocol and signed, entity-scoped envelopes.

Client half: FIFO batch draining without premature marking, per-batch acks,
and an adaptive retry interval that halves on missing connectivity. Wire
format: three length-prefixed sections (canonical JSON header, canonical
JSON body, raw signature); the signature covers body bytes plus nonce, so
any payload tamper invalidates it. Ed25519 keys derive deterministically
from (install seed, entity id).

The transport layer is swappable: an in-process loopback and a real TCP
socket share the same bytes, and a fault-injecting wrapper applies scheduled
drop/duplicate/outage behavior to either.
"""

from __future__ import annotations

import hashlib
import json
import logging
import socket
import struct
import threading
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519

from .agent.core import LocalStore, Record
from .errors import AuthError, ContractViolationError
from .simworld import FaultPlan

log = logging.getLogger(__name__)

WIRE_VERSION = 1
DEFAULT_MAX_RECORDS = 100


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


# ---------------------------------------------------------------------------
# keys and envelopes

def derive_keypair(install_seed: int, entity_id: str):
    """Deterministic per-entity Ed25519 keypair: (private key, public bytes)."""
    seed = hashlib.sha256(f"{install_seed}:{entity_id}".encode()).digest()
    priv = ed25519.Ed25519PrivateKey.from_private_bytes(seed)
    pub = priv.public_key().public_bytes_raw()
    return priv, pub


class KeyRegistry:
    """entity_id -> raw public key bytes, as known to the cloud side."""

    def __init__(self):
        self._keys: dict[str, bytes] = {}

    def register(self, entity_id: str, public_bytes: bytes) -> None:
        self._keys[entity_id] = bytes(public_bytes)

    def get(self, entity_id: str) -> bytes | None:
        return self._keys.get(entity_id)

    @classmethod
    def for_entities(cls, install_seed: int, entity_ids) -> "KeyRegistry":
        reg = cls()
        for eid in entity_ids:
            _, pub = derive_keypair(install_seed, eid)
            reg.register(eid, pub)
        return reg


@dataclass(frozen=True)
class SignedEnvelope:
    payload: bytes
    signer: str
    signature: bytes
    nonce: bytes


def sign(secret_key, payload: bytes, signer: str,
         nonce: bytes | None = None) -> SignedEnvelope:
    """Sign payload||nonce; the nonce defaults to a payload digest so equal
    payloads stay byte-reproducible across runs."""
    if nonce is None:
        nonce = hashlib.sha256(b"vl-nonce" + payload).digest()[:16]
    signature = secret_key.sign(payload + nonce)
    return SignedEnvelope(payload=bytes(payload), signer=signer,
                          signature=signature, nonce=nonce)


def verify_and_scope(envelope: SignedEnvelope, registry: KeyRegistry,
                     requested_entity: str | None = None) -> str:
    """Return the verified signer id; any data access must be filtered to it.

    Raises AuthError("reject") for unknown keys or bad signatures and
    AuthError("scope") when the signer asks about someone else.
    """
    pub = registry.get(envelope.signer)
    if pub is None:
        raise AuthError("reject", f"unknown signer {envelope.signer!r}")
    key = ed25519.Ed25519PublicKey.from_public_bytes(pub)
    try:
        key.verify(envelope.signature, envelope.payload + envelope.nonce)
    except InvalidSignature as exc:
        raise AuthError("reject", "signature does not verify") from exc
    if requested_entity is not None and requested_entity != envelope.signer:
        raise AuthError(
            "scope",
            f"{envelope.signer} may not access {requested_entity}")
    return envelope.signer


def encode_envelope(env: SignedEnvelope, batch_id: int = 0) -> bytes:
    header = canonical_json({
        "version": WIRE_VERSION,
        "entity_id": env.signer,
        "batch_id": batch_id,
        "nonce": env.nonce.hex(),
    })
    sections = (header, env.payload, env.signature)
    return b"".join(struct.pack(">I", len(s)) + s for s in sections)


def decode_envelope(data: bytes) -> tuple[SignedEnvelope, dict]:
    sections = []
    off = 0
    for _ in range(3):
        if off + 4 > len(data):
            raise ContractViolationError("truncated envelope")
        (n,) = struct.unpack_from(">I", data, off)
        off += 4
        if off + n > len(data):
            raise ContractViolationError("truncated envelope section")
        sections.append(data[off:off + n])
        off += n
    if off != len(data):
        raise ContractViolationError("trailing bytes after envelope")
    header = json.loads(sections[0])
    if header.get("version") != WIRE_VERSION:
        raise ContractViolationError(f"unknown wire version {header.get('version')}")
    env = SignedEnvelope(payload=bytes(sections[1]),
                         signer=header["entity_id"],
                         signature=bytes(sections[2]),
                         nonce=bytes.fromhex(header["nonce"]))
    return env, header


# ---------------------------------------------------------------------------
# batching and acks

@dataclass(frozen=True)
class SyncBatch:
    batch_id: int
    entity_id: str
    records: tuple
    created_at: float

    def to_payload(self) -> bytes:
        return canonical_json({
            "kind": "sync",
            "batch_id": self.batch_id,
            "entity_id": self.entity_id,
            "created_at": self.created_at,
            "records": [r.to_dict() for r in self.records],
        })

    @classmethod
    def from_payload(cls, payload: bytes) -> "SyncBatch":
        d = json.loads(payload)
        if d.get("kind") != "sync":
            raise ContractViolationError("payload is not a sync batch")
        return cls(batch_id=d["batch_id"], entity_id=d["entity_id"],
                   records=tuple(Record.from_dict(r) for r in d["records"]),
                   created_at=d["created_at"])


def make_batch(store: LocalStore, max_records: int = DEFAULT_MAX_RECORDS,
               now: float = 0.0) -> SyncBatch | None:
    """Drain up to max_records oldest pending records; nothing is marked
    until the matching ack arrives."""
    if not store.pending:
        return None
    oldest = sorted(store.pending, key=lambda r: (r.t, r.uuid))[:max_records]
    bid = store.next_batch_id()
    store.open_batches[bid] = tuple(r.uuid for r in oldest)
    return SyncBatch(batch_id=bid, entity_id=store.entity_id,
                     records=tuple(oldest), created_at=now)


def handle_ack(store: LocalStore, batch_id: int, now: float = 0.0) -> int:
    """Move exactly that batch's records pending -> synced; idempotent."""
    uuids = store.open_batches.pop(batch_id, None)
    if uuids is None:
        if batch_id not in store.acked_batches:
            log.warning("ack for unknown batch %s on %s",
                        batch_id, store.entity_id)
        return 0
    moved = sum(1 for u in uuids if store.mark_synced(u, now))
    store.acked_batches.add(batch_id)
    # retries reissue still-pending records under new ids; batches whose
    # records have all landed by other means can never mark anything again
    pending_now = {r.uuid for r in store.pending}
    stale = [bid for bid, us in store.open_batches.items()
             if not any(u in pending_now for u in us)]
    for bid in stale:
        del store.open_batches[bid]
        store.acked_batches.add(bid)
    return moved


@dataclass
class SyncSchedulerState:
    base_interval_min: float = 15.0
    current_interval_min: float = 15.0
    floor_min: float = 1.0


def next_sync_interval(state: SyncSchedulerState, outcome: str) -> float:
    """ok resets to the base interval; no_connectivity halves down to the
    floor so the next try comes sooner."""
    if outcome == "ok":
        state.current_interval_min = state.base_interval_min
    elif outcome == "no_connectivity":
        state.current_interval_min = max(
            state.current_interval_min / 2.0, state.floor_min)
    else:
        raise ContractViolationError(f"unknown sync outcome {outcome!r}")
    return state.current_interval_min


# ---------------------------------------------------------------------------
# transports

class LoopbackTransport:
    """In-process delivery straight into a server's receive()."""

    def __init__(self, server):
        self.server = server

    def send(self, message: bytes, entity_id: str):
        return "delivered", self.server.receive(message)


class FaultyTransport:
    """Applies a FaultPlan to an inner transport.

    net_down/net_up toggle connectivity per entity; dup_delivery and
    drop_delivery are one-shot markers consumed by that entity's next send.
    Call advance_to(t) as simulated time passes.
    """

    def __init__(self, inner, plan: FaultPlan | None = None):
        self.inner = inner
        self.plan = plan or FaultPlan()
        self._idx = 0
        self._down: set[str] = set()
        self._oneshot: dict[str, list[str]] = {}
        self.outcomes: list[tuple[str, str]] = []

    def advance_to(self, t: float) -> None:
        entries = self.plan.entries
        while self._idx < len(entries) and entries[self._idx].t <= t:
            f = entries[self._idx]
            self._idx += 1
            if f.kind == "net_down":
                self._down.add(f.entity_id)
            elif f.kind == "net_up":
                self._down.discard(f.entity_id)
            elif f.kind in ("dup_delivery", "drop_delivery"):
                self._oneshot.setdefault(f.entity_id, []).append(f.kind)

    def send(self, message: bytes, entity_id: str):
        if entity_id in self._down:
            self.outcomes.append((entity_id, "dropped"))
            return "dropped", None
        queued = self._oneshot.get(entity_id)
        marker = queued.pop(0) if queued else None
        if marker == "drop_delivery":
            self.outcomes.append((entity_id, "dropped"))
            return "dropped", None
        if marker == "dup_delivery":
            self.inner.send(message, entity_id)
            _, ack = self.inner.send(message, entity_id)
            self.outcomes.append((entity_id, "duplicated"))
            return "duplicated", ack
        _, ack = self.inner.send(message, entity_id)
        self.outcomes.append((entity_id, "delivered"))
        return "delivered", ack


def transmit(transport, envelope: SignedEnvelope, batch_id: int = 0):
    """Encode and send one envelope; returns (outcome, ack bytes or None)."""
    return transport.send(encode_envelope(envelope, batch_id),
                          envelope.signer)


_FRAME = struct.Struct(">I")


def _send_framed(sock: socket.socket, data: bytes) -> None:
    sock.sendall(_FRAME.pack(len(data)) + data)


def _recv_framed(sock: socket.socket) -> bytes | None:
    head = b""
    while len(head) < 4:
        chunk = sock.recv(4 - len(head))
        if not chunk:
            return None
        head += chunk
    (n,) = _FRAME.unpack(head)
    body = b""
    while len(body) < n:
        chunk = sock.recv(n - len(body))
        if not chunk:
            return None
        body += chunk
    return body


class SocketTransport:
    """One TCP round-trip per send; same bytes as the loopback."""

    def __init__(self, host: str, port: int, timeout_s: float = 5.0):
        self.host = host
        self.port = port
        self.timeout_s = timeout_s

    def send(self, message: bytes, entity_id: str):
        with socket.create_connection((self.host, self.port),
                                      timeout=self.timeout_s) as sock:
            _send_framed(sock, message)
            ack = _recv_framed(sock)
        return "delivered", ack


class SocketServer:
    """Threaded localhost server feeding framed messages to handler.receive."""

    def __init__(self, handler, host: str = "127.0.0.1", port: int = 0):
        self.handler = handler
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(16)
        self.host, self.port = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _serve(self) -> None:
        self._sock.settimeout(0.1)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with conn:
                msg = _recv_framed(conn)
                if msg is None:
                    continue
                try:
                    reply = self.handler.receive(msg)
                except AuthError as exc:
                    reply = canonical_json(
                        {"ok": False, "error": "auth", "kind": exc.kind})
                except Exception as exc:  # surface, never kill the server
                    log.warning("server handler failed: %s", exc)
                    reply = canonical_json({"ok": False, "error": "internal"})
                _send_framed(conn, reply)

    def start(self) -> "SocketServer":
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        self._sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


# ---------------------------------------------------------------------------
# client loop

@dataclass
class SyncClient:
    """One entity's sync driver: drain, sign, send, ack, reschedule."""

    store: LocalStore
    private_key: object
    entity_id: str
    transport: object
    scheduler: SyncSchedulerState = field(default_factory=SyncSchedulerState)
    max_records: int = DEFAULT_MAX_RECORDS

    def attempt(self, now: float) -> str:
        """Run one sync attempt; returns idle|ok|no_connectivity."""
        batch = make_batch(self.store, self.max_records, now)
        if batch is None:
            return "idle"
        envelope = sign(self.private_key, batch.to_payload(), self.entity_id)
        _, ack_bytes = transmit(self.transport, envelope, batch.batch_id)
        if ack_bytes is None:
            next_sync_interval(self.scheduler, "no_connectivity")
            return "no_connectivity"
        ack = json.loads(ack_bytes)
        if not ack.get("ok"):
            next_sync_interval(self.scheduler, "no_connectivity")
            return "no_connectivity"
        handle_ack(self.store, ack["batch_id"], now)
        next_sync_interval(self.scheduler, "ok")
        return "ok"
