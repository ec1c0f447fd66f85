"""Cloud side: ingestion, aggregation, funnel, features, scoped predictions."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from valencelab.agent import Record
from valencelab.errors import (AuthError, ContractViolationError,
                               EmptyDatasetError, NotFoundError)
from valencelab.expanse import (EligibilityRules, EntitySummary, MemoryStore,
                                ModelRegistry, SyncServer, aggregate_entity,
                                build_dataset, check_eligibility,
                                context_features, eligibility_funnel,
                                feature_names_for, handle_prediction,
                                imbalance_degree, ingest,
                                predict_request_payload, transform_upsample)
from valencelab.learn import ClusterModel, train
from valencelab.syncsec import (KeyRegistry, SyncBatch, derive_keypair,
                                encode_envelope, make_batch, sign)


def _report(uuid, t=0.0, x=0.0, y=0.0, label="neutral"):
    return Record(uuid=uuid, kind="report", t=t, x=x, y=y, payload=label)


def _sensor(uuid, t=0.0):
    return Record(uuid=uuid, kind="sensor", t=t, x=0.0, y=0.0, payload="still")


def _summary(**kw):
    base = dict(entity_id="e", class_counts=(10, 10, 10), n_reports=30,
                span_days=30.0, has_demographics=True, gender="female")
    base.update(kw)
    return EntitySummary(**base)


def _two_cluster_model() -> ClusterModel:
    return ClusterModel(min_cluster_size=2, min_samples=2,
                        labels=np.array([0, 0, 1], dtype=np.int64),
                        exemplars=np.array([[0.0, 0.0], [10.0, 10.0]]),
                        exemplar_labels=np.array([0, 1], dtype=np.int64),
                        n_clusters=2)


# -- memory store ----------------------------------------------------------------


def test_store_dedupes_by_uuid():
    store = MemoryStore()
    store.register_entity("e1")
    assert store.add("e1", _report("a")) is True
    assert store.add("e1", _report("a", t=99.0)) is False
    assert store.total_records() == 1
    assert len(store.events("e1")) == 1


def test_store_events_sorted_lazily():
    store = MemoryStore()
    store.register_entity("e1")
    store.add("e1", _report("b", t=5.0))
    store.add("e1", _report("a", t=1.0))
    assert [r.uuid for r in store.events("e1")] == ["a", "b"]
    store.add("e1", _report("c", t=0.5))
    assert [r.uuid for r in store.events("e1")] == ["c", "a", "b"]
    with pytest.raises(NotFoundError):
        store.events("ghost")
    with pytest.raises(NotFoundError):
        store.demographics("ghost")


def test_ingest_counts_only_new():
    store = MemoryStore()
    store.register_entity("e1")
    batch = SyncBatch(batch_id=1, entity_id="e1",
                      records=(_report("a"), _report("b")), created_at=0.0)
    assert ingest(store, batch) == 2
    assert ingest(store, batch) == 0
    more = SyncBatch(batch_id=2, entity_id="e1",
                     records=(_report("b"), _report("c")), created_at=1.0)
    assert ingest(store, more) == 1


def test_aggregate_entity_counts_and_span():
    store = MemoryStore()
    store.register_entity("e1", gender="female", birthdate="1990-04-02")
    store.add("e1", _sensor("s0", t=0.0))
    store.add("e1", _report("r0", t=3600.0, label="negative"))
    store.add("e1", _report("r1", t=7200.0, label="positive"))
    store.add("e1", _report("r2", t=86400.0, label="positive"))
    summary = aggregate_entity(store, "e1")
    assert summary.class_counts == (1, 0, 2)
    assert summary.n_reports == 3
    assert summary.span_days == pytest.approx(1.0)
    assert summary.has_demographics is True
    # either missing field disqualifies the demographics flag
    store.register_entity("e2", gender="male")
    store.add("e2", _report("x"))
    assert aggregate_entity(store, "e2").has_demographics is False


# -- imbalance -------------------------------------------------------------------


def test_imbalance_degree_closed_forms():
    assert imbalance_degree((10, 10, 10)) == pytest.approx(0.0)
    assert imbalance_degree((20, 10, 0)) == pytest.approx(40.0 * math.log(2.0))
    assert imbalance_degree((7, 7)) == pytest.approx(0.0)
    with pytest.raises(ContractViolationError):
        imbalance_degree((0, 0, 0))
    with pytest.raises(ContractViolationError):
        imbalance_degree((-1, 2, 3))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=500), min_size=2,
                max_size=5).filter(lambda c: sum(c) > 0))
def test_imbalance_degree_properties(counts):
    got = imbalance_degree(counts)
    assert got >= -1e-9
    perm = list(reversed(counts))
    assert imbalance_degree(perm) == pytest.approx(got)
    n, k = sum(counts), len(counts)
    if all(c * k == n for c in counts):
        assert got == pytest.approx(0.0)
    else:
        assert got > 0.0


# -- eligibility -----------------------------------------------------------------


def test_rules_reject_negative_thresholds():
    with pytest.raises(ContractViolationError):
        EligibilityRules(min_reports=-1)


def test_check_eligibility_reason_order():
    rules = EligibilityRules()
    assert check_eligibility(_summary(has_demographics=False), rules) \
        == (False, "demographics")
    assert check_eligibility(
        _summary(class_counts=(2, 2, 1), n_reports=5), rules) \
        == (False, "min_reports")
    assert check_eligibility(
        _summary(class_counts=(30, 0, 0), n_reports=30), rules) \
        == (False, "min_classes")
    assert check_eligibility(
        _summary(class_counts=(100, 2, 0), n_reports=102), rules) \
        == (False, "imbalance")
    assert check_eligibility(_summary(), rules) == (True, "eligible")
    # a single well-populated class pair passes the class gate
    loose = EligibilityRules(require_demographics=False)
    assert check_eligibility(
        _summary(class_counts=(12, 10, 0), n_reports=22,
                 has_demographics=False), loose) == (True, "eligible")


def test_eligibility_funnel_counts_and_rows():
    store = MemoryStore()
    store.register_entity("a", gender="female", birthdate="1990-01-01")
    for i in range(30):
        store.add("a", _report(f"a{i}", t=60.0 * i,
                               label=("negative", "neutral", "positive")[i % 3]))
    store.register_entity("b")                      # undisclosed
    store.add("b", _report("b0"))
    store.register_entity("c", gender="male", birthdate="1985-05-05")
    for i in range(5):
        store.add("c", _report(f"c{i}", t=60.0 * i, label="positive"))
    rows, counts = eligibility_funnel(store, EligibilityRules())
    assert counts == {"total": 3, "with_demographics": 2, "eligible": 1}
    by_id = {r["entity_id"]: r for r in rows}
    assert by_id["a"]["eligible"] and by_id["a"]["reason"] == "eligible"
    assert by_id["b"]["reason"] == "demographics"
    assert by_id["c"]["reason"] == "min_reports"
    assert by_id["a"]["n_negative"] == by_id["a"]["n_positive"] == 10
    assert by_id["a"]["imbalance_degree"] == pytest.approx(0.0)


# -- transforms and features -----------------------------------------------------


def test_upsample_fills_only_bounded_gaps():
    series = [(0.0, 1.0), (5.0, None), (10.0, None), (20.0, 2.0),
              (24.0, None)]
    got = transform_upsample(series, gap_bound_s=6.0)
    assert got == [(0.0, 1.0), (5.0, 1.0), (10.0, None), (20.0, 2.0),
                   (24.0, 2.0)]
    # nothing observed yet: leading holes stay holes
    assert transform_upsample([(0.0, None)], 10.0) == [(0.0, None)]
    with pytest.raises(ContractViolationError):
        transform_upsample([(5.0, 1.0), (1.0, 2.0)], 10.0)


def test_context_features_layout():
    row = context_features(0, 2, t=6 * 3600.0)       # Monday morning
    assert row.shape == (14,)
    assert row[0] == 1.0 and row[2] == 0.0
    assert row[3] == 1.0                              # morning band
    assert row[6] == 1.0                              # Monday
    assert row[13] == 0.0                             # weekday
    sat = 5 * 86400.0 + 15 * 3600.0
    row = context_features(-1, 2, t=sat)              # noise, Sat afternoon
    assert row[2] == 1.0 and row[0] == row[1] == 0.0
    assert row[4] == 1.0                              # afternoon band
    assert row[11] == 1.0                             # Saturday
    assert row[13] == 1.0                             # weekend
    assert row.sum() == 4.0


def test_feature_names_match_layout():
    names = feature_names_for(2)
    assert len(names) == 14
    assert names[0] == "cluster_0" and names[2] == "cluster_noise"
    assert names[3:6] == ("band_morning", "band_afternoon", "band_night")
    assert names[6] == "dow_mon" and names[13] == "weekend"


# -- dataset assembly ------------------------------------------------------------


def _dataset_store():
    store = MemoryStore()
    store.register_entity("e1", gender="female", birthdate="1991-01-01")
    store.add("e1", _report("r0", t=0.0, x=0.1, y=0.0, label="negative"))
    store.add("e1", _report("r1", t=3600.0, x=-0.1, y=0.2, label="neutral"))
    store.add("e1", _report("r2", t=7200.0, x=9.8, y=10.1, label="positive"))
    return store


def test_build_dataset_reuses_fitted_labels():
    store = _dataset_store()
    model = _two_cluster_model()
    model.labels = np.array([0, -1, 1], dtype=np.int64)  # one noise row
    ds = build_dataset(store, "e1", model)
    assert ds.X.shape == (3, 14)
    assert ds.class_counts == (1, 1, 1)
    assert list(ds.y) == [0, 1, 2]
    assert ds.X[1][2] == 1.0                         # noise bucket preserved
    assert ds.feature_names == feature_names_for(2)


def test_build_dataset_assigns_when_labels_mismatch():
    store = _dataset_store()
    store.add("e1", _report("r3", t=9000.0, x=10.2, y=9.9, label="positive"))
    ds = build_dataset(store, "e1", _two_cluster_model())  # 3 labels, 4 rows
    assert ds.X.shape[0] == 4
    assert ds.X[0][0] == 1.0 and ds.X[3][1] == 1.0   # nearest exemplar


def test_build_dataset_drops_non_finite_rows():
    store = _dataset_store()
    store.add("e1", _report("bad", t=9000.0, x=float("nan"), label="positive"))
    ds = build_dataset(store, "e1", _two_cluster_model())
    assert ds.X.shape[0] == 3
    empty = MemoryStore()
    empty.register_entity("e2")
    with pytest.raises(EmptyDatasetError):
        build_dataset(empty, "e2", _two_cluster_model())
    only_bad = MemoryStore()
    only_bad.register_entity("e3")
    only_bad.add("e3", _report("n0", t=float("inf")))
    model = _two_cluster_model()
    model.labels = np.array([0], dtype=np.int64)
    with pytest.raises(EmptyDatasetError):
        build_dataset(only_bad, "e3", model)


# -- prediction service ----------------------------------------------------------


def _trained_service():
    store = _dataset_store()
    cluster = _two_cluster_model()
    ds = build_dataset(store, "e1", cluster)
    rng = np.random.default_rng(0)
    X = np.vstack([ds.X] * 8 + [rng.normal(size=(4, 14))])
    y = np.concatenate([np.tile(ds.y, 8), np.array([0, 1, 2, 0])])
    model = train("logreg", X, y, n_classes=3)
    registry = ModelRegistry()
    registry.register("e1", model, cluster)
    keys = KeyRegistry.for_entities(7, ["e1", "e2"])
    return store, registry, keys


def test_model_registry_unknown_entity():
    with pytest.raises(NotFoundError):
        ModelRegistry().get("nobody")


def test_prediction_is_scoped_to_signer():
    store, registry, keys = _trained_service()
    priv, _ = derive_keypair(7, "e1")
    env = sign(priv, predict_request_payload("e1", 0.0, 0.0, 6 * 3600.0), "e1")
    label, probs = handle_prediction(env, store, registry, keys)
    assert label in ("negative", "neutral", "positive")
    assert len(probs) == 3
    assert sum(probs) == pytest.approx(1.0)
    # asking about someone else fails even with a valid signature
    env = sign(priv, predict_request_payload("e2", 0.0, 0.0, 0.0), "e1")
    with pytest.raises(AuthError) as err:
        handle_prediction(env, store, registry, keys)
    assert err.value.kind == "scope"


def test_prediction_rejects_bad_requests():
    store, registry, keys = _trained_service()
    priv2, pub2 = derive_keypair(7, "e2")
    env = sign(priv2, predict_request_payload("e2", 0.0, 0.0, 0.0), "e2")
    with pytest.raises(NotFoundError):                # no data for e2
        handle_prediction(env, store, registry, keys)
    priv, _ = derive_keypair(7, "e1")
    not_predict = sign(priv, b'{"kind":"sync"}', "e1")
    with pytest.raises(ContractViolationError):
        handle_prediction(not_predict, store, registry, keys)


def test_sync_server_receive_paths():
    store, registry, keys = _trained_service()
    server = SyncServer(store, keys, registry)
    # sync: a new entity is registered on first contact, dedupe on replay
    agent_store_records = (_report("n0", t=1.0), _report("n1", t=2.0))
    batch = SyncBatch(batch_id=1, entity_id="e2",
                      records=agent_store_records, created_at=2.0)
    priv2, _ = derive_keypair(7, "e2")
    env = sign(priv2, batch.to_payload(), "e2")
    import json
    ack = json.loads(server.receive(encode_envelope(env, batch.batch_id)))
    assert ack == {"ok": True, "batch_id": 1, "new": 2}
    ack = json.loads(server.receive(encode_envelope(env, batch.batch_id)))
    assert ack["new"] == 0
    # sync for someone else is a scope violation
    priv1, _ = derive_keypair(7, "e1")
    forged = sign(priv1, batch.to_payload(), "e1")
    with pytest.raises(AuthError):
        server.receive(encode_envelope(forged, batch.batch_id))
    # predict round trip over the same entry point
    env = sign(priv1, predict_request_payload("e1", 10.0, 10.0, 0.0), "e1")
    reply = json.loads(server.receive(encode_envelope(env, 0)))
    assert reply["ok"] and reply["entity_id"] == "e1"
    assert reply["class"] in ("negative", "neutral", "positive")
    # unknown kinds are contract violations, not auth failures
    junk = sign(priv1, b'{"kind":"gossip"}', "e1")
    with pytest.raises(ContractViolationError):
        server.receive(encode_envelope(junk, 0))
