"""Sync protocol: signing, wire framing, batching, retries, transports."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from valencelab.agent import LocalStore, Record
from valencelab.errors import AuthError, ContractViolationError
from valencelab.simworld import Fault, FaultPlan
from valencelab.syncsec import (KeyRegistry, LoopbackTransport, FaultyTransport,
                                SignedEnvelope, SocketServer, SocketTransport,
                                SyncBatch, SyncClient, SyncSchedulerState,
                                canonical_json, decode_envelope,
                                derive_keypair, encode_envelope, handle_ack,
                                make_batch, next_sync_interval, sign, transmit,
                                verify_and_scope)


def _rec(uuid, t=0.0):
    return Record(uuid=uuid, kind="report", t=t, x=0.0, y=0.0,
                  payload="neutral")


def _loaded_store(n=3) -> LocalStore:
    store = LocalStore("e001")
    for i in range(n):
        store.add_pending(_rec(f"r{i}", t=float(i)))
    return store


class EchoServer:
    """Verifies, then acks whatever batch id arrived."""

    def __init__(self, registry):
        self.registry = registry
        self.batches = []

    def receive(self, message: bytes) -> bytes:
        env, header = decode_envelope(message)
        verify_and_scope(env, self.registry)
        self.batches.append(SyncBatch.from_payload(env.payload))
        return canonical_json({"ok": True, "batch_id": header["batch_id"]})


# -- keys and envelopes ----------------------------------------------------------


def test_keypair_is_deterministic_per_entity():
    priv_a, pub_a = derive_keypair(7, "e001")
    _, pub_a2 = derive_keypair(7, "e001")
    _, pub_b = derive_keypair(7, "e002")
    _, pub_c = derive_keypair(8, "e001")
    assert pub_a == pub_a2
    assert len({pub_a, pub_b, pub_c}) == 3
    assert priv_a.public_key().public_bytes_raw() == pub_a


def test_sign_verify_round_trip_and_reproducibility():
    priv, pub = derive_keypair(7, "e001")
    reg = KeyRegistry()
    reg.register("e001", pub)
    env = sign(priv, b"hello", "e001")
    assert verify_and_scope(env, reg) == "e001"
    assert verify_and_scope(env, reg, requested_entity="e001") == "e001"
    # default nonce is derived from the payload, so envelopes are stable
    assert sign(priv, b"hello", "e001") == env
    assert sign(priv, b"other", "e001").nonce != env.nonce


def test_tampering_is_rejected():
    priv, pub = derive_keypair(7, "e001")
    reg = KeyRegistry.for_entities(7, ["e001", "e002"])
    env = sign(priv, b'{"n":1}', "e001")
    flipped = bytes([env.payload[0] ^ 1]) + env.payload[1:]
    for bad in (
        SignedEnvelope(flipped, env.signer, env.signature, env.nonce),
        SignedEnvelope(env.payload, env.signer,
                       env.signature[:-1] + bytes([env.signature[-1] ^ 1]),
                       env.nonce),
        SignedEnvelope(env.payload, env.signer, env.signature,
                       bytes(16)),
    ):
        with pytest.raises(AuthError) as err:
            verify_and_scope(bad, reg)
        assert err.value.kind == "reject"
    # a valid signature from the wrong entity is also a reject
    with pytest.raises(AuthError) as err:
        verify_and_scope(
            SignedEnvelope(env.payload, "e002", env.signature, env.nonce),
            reg)
    assert err.value.kind == "reject"


def test_unknown_signer_and_scope_violation():
    priv, pub = derive_keypair(7, "e001")
    reg = KeyRegistry()
    env = sign(priv, b"x", "e001")
    with pytest.raises(AuthError) as err:
        verify_and_scope(env, reg)
    assert err.value.kind == "reject"
    reg.register("e001", pub)
    with pytest.raises(AuthError) as err:
        verify_and_scope(env, reg, requested_entity="e002")
    assert err.value.kind == "scope"


def test_envelope_wire_round_trip():
    priv, _ = derive_keypair(7, "e001")
    env = sign(priv, b"payload bytes", "e001")
    data = encode_envelope(env, batch_id=42)
    back, header = decode_envelope(data)
    assert back == env
    assert header["batch_id"] == 42 and header["version"] == 1


def test_envelope_framing_errors():
    priv, _ = derive_keypair(7, "e001")
    data = encode_envelope(sign(priv, b"p", "e001"), batch_id=1)
    with pytest.raises(ContractViolationError):
        decode_envelope(data[:3])
    with pytest.raises(ContractViolationError):
        decode_envelope(data[:-5])
    with pytest.raises(ContractViolationError):
        decode_envelope(data + b"!")
    bad_version = data.replace(b'"version":1', b'"version":9')
    with pytest.raises(ContractViolationError):
        decode_envelope(bad_version)


def test_batch_payload_round_trip():
    batch = SyncBatch(batch_id=3, entity_id="e001",
                      records=(_rec("a"), _rec("b", t=2.0)), created_at=9.0)
    back = SyncBatch.from_payload(batch.to_payload())
    assert back == batch
    with pytest.raises(ContractViolationError):
        SyncBatch.from_payload(canonical_json({"kind": "predict"}))


# -- batching and acks -----------------------------------------------------------


def test_make_batch_oldest_first_without_marking():
    store = _loaded_store(5)
    batch = make_batch(store, max_records=3, now=10.0)
    assert [r.uuid for r in batch.records] == ["r0", "r1", "r2"]
    # draining is speculative: pending is untouched until the ack lands
    assert len(store.pending) == 5
    assert store.open_batches[batch.batch_id] == ("r0", "r1", "r2")
    assert make_batch(LocalStore("e")) is None


def test_handle_ack_moves_exactly_the_batch():
    store = _loaded_store(5)
    batch = make_batch(store, max_records=3, now=10.0)
    assert handle_ack(store, batch.batch_id, now=11.0) == 3
    assert sorted(r.uuid for r in store.pending) == ["r3", "r4"]
    assert store.ever_synced == {"r0", "r1", "r2"}
    assert handle_ack(store, batch.batch_id, now=12.0) == 0  # idempotent


def test_handle_ack_unknown_batch_warns(caplog):
    store = _loaded_store(1)
    with caplog.at_level("WARNING"):
        assert handle_ack(store, 999, now=0.0) == 0
    assert "unknown batch" in caplog.text


def test_overlapping_retry_batches_cannot_double_mark():
    store = _loaded_store(2)
    first = make_batch(store, now=1.0)
    second = make_batch(store, now=2.0)     # retry reissues the same records
    assert handle_ack(store, second.batch_id, now=3.0) == 2
    # the first batch is now stale and closed; acking it moves nothing
    assert first.batch_id not in store.open_batches
    assert handle_ack(store, first.batch_id, now=4.0) == 0
    assert len(store.synced) == 2


def test_sync_interval_schedule():
    state = SyncSchedulerState()
    assert next_sync_interval(state, "no_connectivity") == 7.5
    assert next_sync_interval(state, "no_connectivity") == 3.75
    for _ in range(10):
        got = next_sync_interval(state, "no_connectivity")
    assert got == 1.0                        # clamped at the floor
    assert next_sync_interval(state, "ok") == 15.0
    with pytest.raises(ContractViolationError):
        next_sync_interval(state, "partial")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["ok", "no_connectivity"]), max_size=30))
def test_sync_interval_stays_bounded(outcomes):
    state = SyncSchedulerState()
    for outcome in outcomes:
        got = next_sync_interval(state, outcome)
        assert state.floor_min <= got <= state.base_interval_min


# -- transports ------------------------------------------------------------------


def _client(server, transport=None) -> SyncClient:
    priv, _ = derive_keypair(7, "e001")
    store = _loaded_store(3)
    return SyncClient(store=store, private_key=priv, entity_id="e001",
                      transport=transport or LoopbackTransport(server))


def test_loopback_sync_round_trip():
    server = EchoServer(KeyRegistry.for_entities(7, ["e001"]))
    client = _client(server)
    assert client.attempt(now=5.0) == "ok"
    assert client.attempt(now=6.0) == "idle"
    assert [r.uuid for r in server.batches[0].records] == ["r0", "r1", "r2"]
    assert client.store.ever_synced == {"r0", "r1", "r2"}
    assert client.scheduler.current_interval_min == 15.0


def test_faulty_transport_outage_window():
    server = EchoServer(KeyRegistry.for_entities(7, ["e001"]))
    plan = FaultPlan([Fault(10.0, "e001", "net_down"),
                      Fault(50.0, "e001", "net_up")])
    transport = FaultyTransport(LoopbackTransport(server), plan)
    client = _client(server, transport)
    transport.advance_to(20.0)
    assert client.attempt(now=20.0) == "no_connectivity"
    assert client.scheduler.current_interval_min == 7.5
    transport.advance_to(60.0)
    assert client.attempt(now=60.0) == "ok"
    assert client.scheduler.current_interval_min == 15.0
    assert [o for _, o in transport.outcomes] == ["dropped", "delivered"]


def test_faulty_transport_oneshot_markers():
    server = EchoServer(KeyRegistry.for_entities(7, ["e001"]))
    plan = FaultPlan([Fault(1.0, "e001", "drop_delivery"),
                      Fault(2.0, "e001", "dup_delivery")])
    transport = FaultyTransport(LoopbackTransport(server), plan)
    client = _client(server, transport)
    transport.advance_to(5.0)
    assert client.attempt(now=5.0) == "no_connectivity"   # dropped send
    assert client.attempt(now=6.0) == "ok"                # duplicated send
    assert len(server.batches) == 2                        # same bytes twice
    assert server.batches[0] == server.batches[1]
    # duplicate delivery still acks exactly once on the client
    assert client.store.ever_synced == {"r0", "r1", "r2"}
    assert client.attempt(now=7.0) == "idle"
    kinds = [o for _, o in transport.outcomes]
    assert kinds == ["dropped", "duplicated"]


def test_faulty_transport_ignores_other_entities():
    server = EchoServer(KeyRegistry.for_entities(7, ["e001", "e002"]))
    plan = FaultPlan([Fault(0.0, "e002", "net_down")])
    transport = FaultyTransport(LoopbackTransport(server), plan)
    transport.advance_to(1.0)
    client = _client(server, transport)
    assert client.attempt(now=1.0) == "ok"


def test_socket_transport_matches_loopback_bytes():
    reg = KeyRegistry.for_entities(7, ["e001"])
    with SocketServer(EchoServer(reg)) as srv:
        transport = SocketTransport(srv.host, srv.port)
        client = _client(srv.handler, transport)
        assert client.attempt(now=1.0) == "ok"
        assert client.store.ever_synced == {"r0", "r1", "r2"}


def test_socket_server_reports_auth_and_internal_errors():
    reg = KeyRegistry.for_entities(7, ["e001"])

    class Boom:
        def receive(self, message):
            raise ValueError("nope")

    stranger_priv, _ = derive_keypair(99, "intruder")
    env = sign(stranger_priv, b"{}", "intruder")
    with SocketServer(EchoServer(reg)) as srv:
        _, reply = SocketTransport(srv.host, srv.port).send(
            encode_envelope(env, 1), "intruder")
        got = json.loads(reply)
        assert got == {"ok": False, "error": "auth", "kind": "reject"}
    with SocketServer(Boom()) as srv:
        _, reply = SocketTransport(srv.host, srv.port).send(
            encode_envelope(env, 1), "intruder")
        assert json.loads(reply) == {"ok": False, "error": "internal"}


def test_client_treats_error_reply_as_no_connectivity():
    class Refuser:
        def receive(self, message):
            return canonical_json({"ok": False, "error": "auth",
                                   "kind": "reject"})

    client = _client(Refuser())
    assert client.attempt(now=1.0) == "no_connectivity"
    assert len(client.store.pending) == 3    # nothing marked, retry later
