"""Command-line pipeline: simulate, drive agents, screen, tune, report.

Subcommands
-----------
simulate   write the cohort roster, the event log, and the fault plan
pipeline   full chain: simulate -> agents+sync -> funnel -> automl -> reports
learn      eligibility funnel + per-entity model tuning from stored artifacts
evaluate   model comparison statistics from models.csv
report     summary.md plus the duration-masked run hash
serve      TCP server answering sync batches and prediction requests
predict    one scoped prediction, in-process or against a running server

All stages are deterministic for a fixed (config, seed) except wall-clock
durations, which are reported but excluded from the run hash.

Exit codes: 0 success, 2 configuration problems, 3 pipeline/data problems,
4 authorization failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .agent import (Record, SensingAgent, analyze_sentiment, dedupe_store,
                    feed_tick, homeostasis_check, ingest_report,
                    on_system_event)
from .errors import (AuthError, ConfigurationError, ContractViolationError,
                     EmptyDatasetError, NoStructureError, NotFoundError,
                     PipelineError, ValenceLabError)
from .evalstat import (ConfusionMatrix, StatConfig, mcc_multiclass,
                       u_test_verdict)
from .expanse import (EligibilityRules, MemoryStore, ModelRegistry,
                      SyncServer, build_dataset, eligibility_funnel,
                      predict_request_payload)
from .learn import (MODEL_KINDS, AutomlConfig, ClusterModel, automl_entity,
                    autodiscover_cluster_params, fit_cluster_model,
                    model_from_dict, model_to_dict)
from .learn.bayesopt import DESIGN_SIZE
from .simworld import (Cohort, CohortSpec, EntityProfile, FaultPlan, SimClock,
                       events_from_jsonl, events_to_jsonl, load_cohort_spec,
                       load_fault_plan, parse_kv_config, run_cohort)
from .syncsec import (FaultyTransport, KeyRegistry, LoopbackTransport,
                      SocketServer, SocketTransport, SyncClient,
                      derive_keypair, encode_envelope, sign)

log = logging.getLogger("valencelab.cli")

METRICS = ("f1", "mcc", "both")


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass
class ExperimentConfig:
    """Everything one run needs; file values lose to explicit CLI flags."""

    seed: int = 7
    out: str = "out"
    cohort: str = ""            # path to a cohort config; "" = packaged default
    fault_plan: str = ""        # path to a fault plan; "" = no faults
    models: tuple = MODEL_KINDS
    metric: str = "both"
    budget: int = 8             # tuning evaluations per (entity, kind)
    cv_max_splits: int = 3
    min_samples: int = 5        # clustering density parameter
    sync_max_records: int = 200
    sync_base_interval_min: float = 15.0
    step_s: float = 900.0       # harness window; also the revive cadence
    min_reports: int = 20
    min_classes: int = 2
    min_per_class: int = 2
    max_imbalance_degree: float = 25.0
    require_demographics: bool = True

    def __post_init__(self):
        if isinstance(self.models, str):
            self.models = tuple(
                m.strip() for m in self.models.split(",") if m.strip())
        unknown = [m for m in self.models if m not in MODEL_KINDS]
        if unknown:
            raise ConfigurationError(f"unknown model kinds: {unknown}")
        if not self.models:
            raise ConfigurationError("at least one model kind is required")
        if self.metric not in METRICS:
            raise ConfigurationError(
                f"metric must be one of {METRICS}, got {self.metric!r}")
        for name in ("cv_max_splits", "min_samples", "sync_max_records"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        # the tuner spends DESIGN_SIZE evaluations on its space-filling
        # design before modeling anything, so smaller budgets cannot run
        if self.budget < DESIGN_SIZE:
            raise ConfigurationError(f"budget must be >= {DESIGN_SIZE}")
        if self.step_s <= 0 or self.sync_base_interval_min <= 0:
            raise ConfigurationError("time intervals must be > 0")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in types:
                raise ConfigurationError(f"unknown experiment key {key!r}")
            ann = types[key]
            try:
                if ann == "int":
                    kwargs[key] = int(raw)
                elif ann == "float":
                    kwargs[key] = float(raw)
                elif ann == "bool":
                    if raw.lower() not in ("true", "false"):
                        raise ValueError(raw)
                    kwargs[key] = raw.lower() == "true"
                elif ann == "tuple":
                    kwargs[key] = tuple(
                        v.strip() for v in raw.split(",") if v.strip())
                else:
                    kwargs[key] = raw
            except ValueError as exc:
                raise ConfigurationError(
                    f"bad value for {key!r}: {raw!r}") from exc
        return cls(**kwargs)

    def rules(self) -> EligibilityRules:
        return EligibilityRules(
            require_demographics=self.require_demographics,
            min_reports=self.min_reports,
            min_classes=self.min_classes,
            min_per_class=self.min_per_class,
            max_imbalance_degree=self.max_imbalance_degree)


def load_experiment_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"no experiment config at {p}")
    return ExperimentConfig.from_mapping(parse_kv_config(p.read_text()))


def _default_cohort_spec() -> CohortSpec:
    text = (resources.files("valencelab") / "data"
            / "default_cohort.cfg").read_text()
    return CohortSpec.from_mapping(parse_kv_config(text))


def _cohort_spec_for(config: ExperimentConfig) -> CohortSpec:
    if not config.cohort:
        return _default_cohort_spec()
    p = Path(config.cohort)
    if not p.is_file():
        raise ConfigurationError(f"no cohort config at {p}")
    return load_cohort_spec(p)


def _fault_plan_for(config: ExperimentConfig) -> FaultPlan:
    if not config.fault_plan:
        return FaultPlan()
    p = Path(config.fault_plan)
    if not p.is_file():
        raise ConfigurationError(f"no fault plan at {p}")
    return load_fault_plan(p)


def _entity_seed(seed: int, entity_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{entity_id}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


# ---------------------------------------------------------------------------
# stage 1: simulate


def simulate_stage(config: ExperimentConfig):
    """Build the cohort and replay the whole horizon."""
    from .simworld import build_cohort
    spec = _cohort_spec_for(config)
    cohort = build_cohort(spec, config.seed)
    plan = _fault_plan_for(config)
    events, _ = run_cohort(cohort, plan)
    return cohort, events, plan


# ---------------------------------------------------------------------------
# stage 2: drive the device agents and sync everything to the store


@dataclass
class DriveResult:
    mstore: MemoryStore
    keys: KeyRegistry
    private_keys: dict
    server: SyncServer
    transport: FaultyTransport
    agents: dict
    clients: dict
    recoveries: list          # (entity_id, crash_t, revive_t)
    energy_spent: dict        # entity_id -> battery percent over the run
    sentiment_counts: dict    # text-message sentiment class tallies


def drive_agents(cohort: Cohort, events, plan: FaultPlan,
                 config: ExperimentConfig) -> DriveResult:
    """Windowed replay: events and faults strictly in time order, periodic
    checks (feed, revive, homeostasis) at every step_s boundary, sync
    attempts on each client's own schedule."""
    keys = KeyRegistry()
    private_keys = {}
    mstore = MemoryStore()
    for prof in cohort.profiles:
        sk, pk = derive_keypair(config.seed, prof.entity_id)
        private_keys[prof.entity_id] = sk
        keys.register(prof.entity_id, pk)
        mstore.register_entity(
            prof.entity_id, prof.gender,
            prof.birthdate.isoformat() if prof.birthdate else None)

    server = SyncServer(mstore, keys)
    transport = FaultyTransport(LoopbackTransport(server), plan)
    agents = {p.entity_id: SensingAgent(p.entity_id) for p in cohort.profiles}
    base_min = config.sync_base_interval_min
    clients = {}
    next_sync = {}
    for prof in cohort.profiles:
        eid = prof.entity_id
        client = SyncClient(
            store=agents[eid].store, private_key=private_keys[eid],
            entity_id=eid, transport=transport,
            max_records=config.sync_max_records)
        client.scheduler.base_interval_min = base_min
        client.scheduler.current_interval_min = base_min
        clients[eid] = client
        next_sync[eid] = base_min * 60.0

    horizon = cohort.spec.days * 86400.0
    agent_faults = [f for f in plan.entries if f.kind in ("crash", "reboot")]
    recoveries = []
    crash_pending: dict[str, list[float]] = {}
    energy_spent = {p.entity_id: 0.0 for p in cohort.profiles}
    sentiment_counts = {"negative": 0, "neutral": 0, "positive": 0}
    order = sorted(agents)

    ei = fi = 0
    n_windows = math.ceil(horizon / config.step_s)
    for w in range(n_windows):
        t_end = min((w + 1) * config.step_s, horizon)

        # interleave events and lifecycle faults by time; faults win ties so
        # a crash at t kills the event at t
        while True:
            ev = events[ei] if ei < len(events) and events[ei].t < t_end \
                else None
            fl = agent_faults[fi] if fi < len(agent_faults) \
                and agent_faults[fi].t < t_end else None
            if ev is None and fl is None:
                break
            if ev is not None and (fl is None or ev.t < fl.t):
                ei += 1
                agent = agents[ev.entity_id]
                if agent.status.state != "running":
                    continue        # device is down; the moment is lost
                if ev.kind == "report":
                    ingest_report(agent, ev.payload, ev.t, (ev.x, ev.y),
                                  uuid=ev.uuid)
                elif ev.kind == "sensor":
                    dedupe_store(agent.store, Record(
                        ev.uuid, "sensor", ev.t, ev.x, ev.y, ev.payload))
                else:
                    _, _, cls = analyze_sentiment(ev.payload)
                    sentiment_counts[cls] += 1
                    dedupe_store(agent.store, Record(
                        ev.uuid, "text", ev.t, ev.x, ev.y, ev.payload))
            else:
                fi += 1
                agent = agents[fl.entity_id]
                if fl.kind == "crash":
                    if agent.status.state == "running":
                        crash_pending.setdefault(
                            fl.entity_id, []).append(fl.t)
                        on_system_event(agent, "crash")
                else:
                    on_system_event(agent, "boot", now=fl.t)
                    for t_c in crash_pending.pop(fl.entity_id, []):
                        recoveries.append((fl.entity_id, t_c, fl.t))

        # boundary work: sensing feed, revival, periodic self-checks
        clock = SimClock(now=t_end)
        for eid in order:
            agent = agents[eid]
            _, spent = feed_tick(agent, clock)
            energy_spent[eid] += spent
            if agent.status.state == "crashed":
                on_system_event(agent, "revive_tick", now=t_end)
                for t_c in crash_pending.pop(eid, []):
                    recoveries.append((eid, t_c, t_end))
            elif (t_end - agent.status.last_homeostasis
                  >= agent.status.check_interval_min * 60.0):
                homeostasis_check(agent, t_end)

        # sync attempts due in this window (local ingest above happens
        # first; cross-window ordering stays exact)
        for eid in order:
            client = clients[eid]
            while next_sync[eid] <= t_end:
                t_s = next_sync[eid]
                if agents[eid].status.state == "running":
                    transport.advance_to(t_s)
                    client.attempt(t_s)
                next_sync[eid] = t_s + \
                    client.scheduler.current_interval_min * 60.0

    # quiesce: every committed record must land exactly once
    transport.advance_to(horizon)
    for eid in order:
        for _ in range(10000):
            if clients[eid].attempt(horizon) == "idle":
                break
        else:
            raise PipelineError(f"sync for {eid} refused to quiesce")

    return DriveResult(
        mstore=mstore, keys=keys, private_keys=private_keys, server=server,
        transport=transport, agents=agents, clients=clients,
        recoveries=recoveries, energy_spent=energy_spent,
        sentiment_counts=sentiment_counts)


# ---------------------------------------------------------------------------
# stage 3: eligibility funnel


def funnel_stage(mstore: MemoryStore, config: ExperimentConfig):
    return eligibility_funnel(mstore, config.rules())


# ---------------------------------------------------------------------------
# stage 4: per-entity clustering + model tuning


def learn_stage(mstore: MemoryStore, funnel_rows, config: ExperimentConfig):
    """Cluster, featurize, and tune every eligible entity.

    Returns (model_rows, registry, registry_doc); rows carry both metrics
    regardless of the report metric setting.
    """
    eligible = [r["entity_id"] for r in funnel_rows if r["eligible"]]
    registry = ModelRegistry()
    model_rows = []
    registry_doc = {"seed": config.seed, "entities": {}}
    automl_cfg = AutomlConfig(budget=config.budget,
                              cv_max_splits=config.cv_max_splits,
                              kinds=tuple(config.models))
    for eid in eligible:
        reports = [r for r in mstore.events(eid) if r.kind == "report"]
        points = np.array([[r.x, r.y] for r in reports])
        mcs, ms = autodiscover_cluster_params(
            points, min_samples_grid=(config.min_samples,))
        cmodel = fit_cluster_model(points, mcs, ms)
        ds = build_dataset(mstore, eid, cmodel)
        models = automl_entity(ds.X, ds.y, automl_cfg,
                               seed=_entity_seed(config.seed, eid),
                               feature_names=ds.feature_names)
        best_kind = max(config.models,
                        key=lambda k: (models[k].cv_score,
                                       MODEL_KINDS.index(k)))
        registry.register(eid, models[best_kind], cmodel)
        kind_scores = {}
        for kind in config.models:
            m = models[kind]
            mcc = mcc_multiclass(ConfusionMatrix(np.asarray(m.cv_confusion)))
            model_rows.append({
                "entity_id": eid, "kind": kind,
                "cv_f1": float(m.cv_score), "cv_mcc": float(mcc),
                "duration_s": float(m.duration_s),
                "cv_splits": int(m.cv_splits),
                "n_reports": len(reports),
                "n_clusters": int(cmodel.n_clusters),
                "min_cluster_size": int(mcs), "min_samples": int(ms),
            })
            kind_scores[kind] = {"cv_f1": float(m.cv_score),
                                 "cv_mcc": float(mcc)}
        registry_doc["entities"][eid] = {
            "best_kind": best_kind,
            "model": model_to_dict(models[best_kind]),
            "cluster": cmodel.to_dict(),
            "kinds": kind_scores,
        }
        log.info("tuned %s: best %s cv_f1=%.3f", eid, best_kind,
                 models[best_kind].cv_score)
    return model_rows, registry, registry_doc


# ---------------------------------------------------------------------------
# stage 5: comparison statistics


def _metric_by_kind(model_rows, metric_key: str) -> dict:
    out: dict[str, list] = {}
    for row in model_rows:
        out.setdefault(row["kind"], []).append(float(row[metric_key]))
    return out


def _quartile_rows(by_kind: dict) -> list:
    rows = []
    for kind in sorted(by_kind):
        v = np.asarray(by_kind[kind], dtype=np.float64)
        q = np.percentile(v, [0, 25, 50, 75, 100])
        rows.append({
            "kind": kind, "min": q[0], "q1": q[1], "median": q[2],
            "q3": q[3], "max": q[4], "mean": float(v.mean()), "n": len(v)})
    return rows


def _stats_table(by_kind: dict, metric_name: str) -> str:
    kinds = sorted(by_kind, key=lambda k: -float(np.mean(by_kind[k])))
    lines = [f"## Pairwise Mann-Whitney U on per-entity {metric_name}", "",
             "| comparison | U | p | verdict |",
             "|---|---|---|---|"]
    for i in range(len(kinds)):
        for j in range(i + 1, len(kinds)):
            a, b = kinds[i], kinds[j]
            r = u_test_verdict(by_kind[a], by_kind[b], StatConfig())
            lines.append(f"| {a} vs {b} | {r['U']:.1f} | {r['p']:.3e} "
                         f"| {r['verdict']} |")
    return "\n".join(lines)


def evaluate_stage(model_rows, config: ExperimentConfig):
    """Returns (stats markdown, f1 quartile rows, mcc quartile rows)."""
    if not model_rows:
        raise PipelineError("no tuned models to evaluate")
    blocks = ["# Model comparison", ""]
    by_f1 = _metric_by_kind(model_rows, "cv_f1")
    by_mcc = _metric_by_kind(model_rows, "cv_mcc")
    if config.metric in ("f1", "both"):
        blocks.append(_stats_table(by_f1, "weighted F1"))
        blocks.append("")
    if config.metric in ("mcc", "both"):
        blocks.append(_stats_table(by_mcc, "MCC"))
        blocks.append("")
    stats_text = "\n".join(blocks)
    return stats_text, _quartile_rows(by_f1), _quartile_rows(by_mcc)


# ---------------------------------------------------------------------------
# stage 6: summary + run hash


def run_hash(funnel_rows, model_rows, stats_text: str) -> str:
    """Deterministic digest of the run outputs; durations are masked because
    wall-clock is the one legitimately machine-dependent output.

    Values are hashed in their CSV text form so the digest is identical
    whether rows come from memory or from re-parsed artifacts."""
    funnel = [{k: _fmt(v) for k, v in row.items()} for row in funnel_rows]
    masked = [{k: _fmt(v) for k, v in row.items() if k != "duration_s"}
              for row in model_rows]
    doc = json.dumps({"funnel": funnel, "models": masked,
                      "stats": stats_text}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


def report_stage(funnel_rows, counts, model_rows, config: ExperimentConfig,
                 stats_text: str) -> tuple[str, str]:
    """Returns (summary markdown, run hash)."""
    by_f1 = _metric_by_kind(model_rows, "cv_f1")
    by_mcc = _metric_by_kind(model_rows, "cv_mcc")
    by_dur = _metric_by_kind(model_rows, "duration_s")
    kinds = sorted(by_f1, key=lambda k: -float(np.mean(by_f1[k])))
    lines = [
        "# Run summary", "",
        f"- seed: {config.seed}",
        f"- funnel: {counts['total']} -> {counts['with_demographics']} "
        f"-> {counts['eligible']}",
        f"- tuned entities: {counts['eligible']}",
        f"- tuning budget: {config.budget} evaluations per model kind", "",
        "| model | mean F1 | mean MCC | total tuning wall (s) |",
        "|---|---|---|---|",
    ]
    for k in kinds:
        lines.append(f"| {k} | {np.mean(by_f1[k]):.4f} "
                     f"| {np.mean(by_mcc[k]):.4f} "
                     f"| {np.sum(by_dur[k]):.1f} |")
    lines += ["",
              "Durations are wall-clock and machine-dependent; they are "
              "excluded from the run hash.", ""]
    digest = run_hash(funnel_rows, model_rows, stats_text)
    return "\n".join(lines), digest


# ---------------------------------------------------------------------------
# artifact IO


FUNNEL_FIELDS = ("entity_id", "gender", "n_reports", "n_negative",
                 "n_neutral", "n_positive", "imbalance_degree", "eligible",
                 "reason")
MODEL_FIELDS = ("entity_id", "kind", "cv_f1", "cv_mcc", "duration_s",
                "cv_splits", "n_reports", "n_clusters", "min_cluster_size",
                "min_samples")
BOX_FIELDS = ("kind", "min", "q1", "median", "q3", "max", "mean", "n")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)


def _write_csv(path: Path, fieldnames, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fieldnames)
    for row in rows:
        writer.writerow([_fmt(row[k]) for k in fieldnames])
    path.write_text(buf.getvalue())


def _read_csv(path: Path) -> list:
    if not path.is_file():
        raise PipelineError(f"missing artifact {path}; run earlier stages")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _parse_funnel_rows(raw_rows) -> list:
    rows = []
    for r in raw_rows:
        rows.append({
            "entity_id": r["entity_id"], "gender": r["gender"],
            "n_reports": int(r["n_reports"]),
            "n_negative": int(r["n_negative"]),
            "n_neutral": int(r["n_neutral"]),
            "n_positive": int(r["n_positive"]),
            "imbalance_degree": float(r["imbalance_degree"]),
            "eligible": r["eligible"] == "true",
            "reason": r["reason"]})
    return rows


def _parse_model_rows(raw_rows) -> list:
    rows = []
    for r in raw_rows:
        rows.append({
            "entity_id": r["entity_id"], "kind": r["kind"],
            "cv_f1": float(r["cv_f1"]), "cv_mcc": float(r["cv_mcc"]),
            "duration_s": float(r["duration_s"]),
            "cv_splits": int(r["cv_splits"]),
            "n_reports": int(r["n_reports"]),
            "n_clusters": int(r["n_clusters"]),
            "min_cluster_size": int(r["min_cluster_size"]),
            "min_samples": int(r["min_samples"])})
    return rows


def _roundtrip(rows, parser) -> list:
    """Normalize rows through their CSV text form so downstream numbers are
    identical whether they come from memory or from re-read artifacts."""
    return parser([{k: _fmt(v) for k, v in row.items()} for row in rows])


def _funnel_counts(rows) -> dict:
    return {
        "total": len(rows),
        "with_demographics": sum(1 for r in rows
                                 if r["reason"] != "demographics"),
        "eligible": sum(1 for r in rows if r["eligible"]),
    }


def _store_to_jsonl(mstore: MemoryStore) -> str:
    lines = []
    for eid in mstore.entity_ids():
        for rec in mstore.events(eid):
            doc = {"entity_id": eid}
            doc.update(rec.to_dict())
            lines.append(json.dumps(doc, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def _load_cohort_file(out: Path) -> list:
    path = out / "cohort.jsonl"
    if not path.is_file():
        raise PipelineError(f"missing artifact {path}; run simulate first")
    return [EntityProfile.from_dict(json.loads(line))
            for line in path.read_text().splitlines() if line.strip()]


def _rebuild_store(out: Path) -> MemoryStore:
    profiles = _load_cohort_file(out)
    store_path = out / "store.jsonl"
    if not store_path.is_file():
        raise PipelineError(
            f"missing artifact {store_path}; run pipeline first")
    mstore = MemoryStore()
    for prof in profiles:
        mstore.register_entity(
            prof.entity_id, prof.gender,
            prof.birthdate.isoformat() if prof.birthdate else None)
    for line in store_path.read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        eid = doc.pop("entity_id")
        mstore.add(eid, Record.from_dict(doc))
    return mstore


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class RunResult:
    config: ExperimentConfig
    cohort: Cohort
    events: list
    plan: FaultPlan
    drive: DriveResult
    funnel_rows: list
    funnel_counts: dict
    model_rows: list
    registry: ModelRegistry
    registry_doc: dict
    stats_text: str
    summary_text: str
    digest: str
    out_dir: Path


def run_experiment(config: ExperimentConfig,
                   write: bool = True) -> RunResult:
    """The pipeline subcommand: every stage chained in memory, artifacts
    written at the end."""
    t0 = time.perf_counter()
    cohort, events, plan = simulate_stage(config)
    log.info("simulated %d events for %d entities",
             len(events), len(cohort.profiles))
    drive = drive_agents(cohort, events, plan, config)
    log.info("server holds %d records", drive.mstore.total_records())
    funnel_rows, counts = funnel_stage(drive.mstore, config)
    funnel_rows = _roundtrip(funnel_rows, _parse_funnel_rows)
    log.info("funnel: %(total)d -> %(with_demographics)d -> %(eligible)d",
             counts)
    model_rows, registry, registry_doc = learn_stage(
        drive.mstore, funnel_rows, config)
    model_rows = _roundtrip(model_rows, _parse_model_rows)
    drive.server.models = registry
    stats_text, box_f1, box_mcc = evaluate_stage(model_rows, config)
    summary_text, digest = report_stage(
        funnel_rows, counts, model_rows, config, stats_text)
    log.info("pipeline finished in %.1fs, hash %s",
             time.perf_counter() - t0, digest[:12])

    out = Path(config.out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "cohort.jsonl").write_text(cohort.to_jsonl())
        (out / "events.jsonl").write_text(events_to_jsonl(events))
        (out / "faults.txt").write_text(plan.to_text())
        (out / "store.jsonl").write_text(_store_to_jsonl(drive.mstore))
        _write_csv(out / "funnel.csv", FUNNEL_FIELDS, funnel_rows)
        _write_csv(out / "models.csv", MODEL_FIELDS, model_rows)
        (out / "models.json").write_text(
            json.dumps(registry_doc, sort_keys=True, indent=1))
        (out / "stats.md").write_text(stats_text)
        if config.metric in ("f1", "both"):
            _write_csv(out / "boxplot_f1.csv", BOX_FIELDS, box_f1)
        if config.metric in ("mcc", "both"):
            _write_csv(out / "boxplot_mcc.csv", BOX_FIELDS, box_mcc)
        (out / "summary.md").write_text(summary_text)
        (out / "run_hash.txt").write_text(digest + "\n")

    return RunResult(
        config=config, cohort=cohort, events=events, plan=plan, drive=drive,
        funnel_rows=funnel_rows, funnel_counts=counts, model_rows=model_rows,
        registry=registry, registry_doc=registry_doc, stats_text=stats_text,
        summary_text=summary_text, digest=digest, out_dir=out)


# ---------------------------------------------------------------------------
# serving helpers


def _registry_from_doc(doc: dict) -> ModelRegistry:
    registry = ModelRegistry()
    for eid, entry in doc["entities"].items():
        registry.register(eid, model_from_dict(entry["model"]),
                          ClusterModel.from_dict(entry["cluster"]))
    return registry


def _server_from_artifacts(out: Path):
    """(SyncServer, seed) rebuilt from cohort.jsonl + models.json."""
    models_path = out / "models.json"
    if not models_path.is_file():
        raise PipelineError(f"missing artifact {models_path}; run learn")
    doc = json.loads(models_path.read_text())
    profiles = _load_cohort_file(out)
    keys = KeyRegistry()
    mstore = MemoryStore()
    for prof in profiles:
        _, pk = derive_keypair(int(doc["seed"]), prof.entity_id)
        keys.register(prof.entity_id, pk)
        mstore.register_entity(
            prof.entity_id, prof.gender,
            prof.birthdate.isoformat() if prof.birthdate else None)
    return SyncServer(mstore, keys, _registry_from_doc(doc)), int(doc["seed"])


def _predict_once(transport, seed: int, entity: str, as_entity: str,
                  x: float, y: float, t: float) -> dict:
    sk, _ = derive_keypair(seed, as_entity)
    payload = predict_request_payload(entity, x, y, t)
    envelope = sign(sk, payload, as_entity)
    _, reply = transport.send(encode_envelope(envelope), as_entity)
    if reply is None:
        raise PipelineError("no reply from server")
    doc = json.loads(reply)
    if not doc.get("ok"):
        if doc.get("error") == "auth":
            raise AuthError(doc.get("kind", "reject"),
                            "server refused the request")
        raise PipelineError(f"server error: {doc}")
    return doc


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(config: ExperimentConfig) -> int:
    cohort, events, plan = simulate_stage(config)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cohort.jsonl").write_text(cohort.to_jsonl())
    (out / "events.jsonl").write_text(events_to_jsonl(events))
    (out / "faults.txt").write_text(plan.to_text())
    print(f"simulated {len(events)} events for {len(cohort.profiles)} "
          f"entities into {out}")
    return 0


def cmd_pipeline(config: ExperimentConfig) -> int:
    result = run_experiment(config)
    c = result.funnel_counts
    print(f"funnel: {c['total']} -> {c['with_demographics']} "
          f"-> {c['eligible']}")
    print(f"outputs in {result.out_dir}, run hash {result.digest}")
    return 0


def cmd_learn(config: ExperimentConfig) -> int:
    out = Path(config.out)
    mstore = _rebuild_store(out)
    funnel_rows, counts = funnel_stage(mstore, config)
    model_rows, _, registry_doc = learn_stage(mstore, funnel_rows, config)
    _write_csv(out / "funnel.csv", FUNNEL_FIELDS, funnel_rows)
    _write_csv(out / "models.csv", MODEL_FIELDS, model_rows)
    (out / "models.json").write_text(
        json.dumps(registry_doc, sort_keys=True, indent=1))
    print(f"tuned {counts['eligible']} entities into {out}")
    return 0


def cmd_evaluate(config: ExperimentConfig) -> int:
    out = Path(config.out)
    model_rows = _parse_model_rows(_read_csv(out / "models.csv"))
    stats_text, box_f1, box_mcc = evaluate_stage(model_rows, config)
    (out / "stats.md").write_text(stats_text)
    if config.metric in ("f1", "both"):
        _write_csv(out / "boxplot_f1.csv", BOX_FIELDS, box_f1)
    if config.metric in ("mcc", "both"):
        _write_csv(out / "boxplot_mcc.csv", BOX_FIELDS, box_mcc)
    print(f"comparison statistics written to {out / 'stats.md'}")
    return 0


def cmd_report(config: ExperimentConfig) -> int:
    out = Path(config.out)
    funnel_rows = _parse_funnel_rows(_read_csv(out / "funnel.csv"))
    model_rows = _parse_model_rows(_read_csv(out / "models.csv"))
    counts = _funnel_counts(funnel_rows)
    stats_text, _, _ = evaluate_stage(model_rows, config)
    summary_text, digest = report_stage(
        funnel_rows, counts, model_rows, config, stats_text)
    (out / "summary.md").write_text(summary_text)
    (out / "run_hash.txt").write_text(digest + "\n")
    print(f"summary written to {out / 'summary.md'}, run hash {digest}")
    return 0


def cmd_serve(config: ExperimentConfig, host: str, port: int,
              max_seconds: float | None) -> int:
    handler, _ = _server_from_artifacts(Path(config.out))
    server = SocketServer(handler, host=host, port=port)
    server.start()
    print(f"serving on {server.host}:{server.port}", flush=True)
    try:
        if max_seconds is None:
            while True:
                time.sleep(0.5)
        else:
            time.sleep(max_seconds)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_predict(config: ExperimentConfig, entity: str, as_entity: str | None,
                x: float, y: float, t: float, host: str | None,
                port: int | None) -> int:
    signer = as_entity or entity
    if host is not None:
        if port is None:
            raise ConfigurationError("--port is required with --host")
        transport = SocketTransport(host, port)
        doc_path = Path(config.out) / "models.json"
        if not doc_path.is_file():
            raise PipelineError(f"missing artifact {doc_path}; run learn")
        seed = int(json.loads(doc_path.read_text())["seed"])
    else:
        handler, seed = _server_from_artifacts(Path(config.out))
        transport = LoopbackTransport(handler)
    doc = _predict_once(transport, seed, entity, signer, x, y, t)
    print(json.dumps(doc, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None,
                        help="experiment config file (key = value lines)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="artifact directory")
    parser.add_argument("--cohort", default=None,
                        help="cohort config file; omit for the default")
    parser.add_argument("--fault-plan", default=None,
                        help="fault plan file; omit for a clean run")
    parser.add_argument("--models", default=None,
                        help="comma-separated kinds "
                             f"(subset of {','.join(MODEL_KINDS)})")
    parser.add_argument("--metric", choices=METRICS, default=None)
    parser.add_argument("--budget", type=int, default=None,
                        help="tuning evaluations per model kind")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="valencelab",
        description="Deterministic mobile-sensing valence pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "pipeline", "learn", "evaluate", "report"):
        _add_common(sub.add_parser(name))
    serve = sub.add_parser("serve")
    _add_common(serve)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=0)
    serve.add_argument("--max-seconds", type=float, default=None,
                       help="stop after this long (default: run forever)")
    predict = sub.add_parser("predict")
    _add_common(predict)
    predict.add_argument("--entity", required=True,
                         help="entity whose model answers")
    predict.add_argument("--as-entity", default=None,
                         help="signing identity (defaults to --entity)")
    predict.add_argument("--x", type=float, required=True)
    predict.add_argument("--y", type=float, required=True)
    predict.add_argument("--t", type=float, required=True)
    predict.add_argument("--host", default=None,
                         help="remote server; omit to answer in-process")
    predict.add_argument("--port", type=int, default=None)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    config = (load_experiment_config(args.config)
              if args.config else ExperimentConfig())
    overrides = {}
    for key in ("seed", "out", "cohort", "models", "metric", "budget"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "fault_plan", None) is not None:
        overrides["fault_plan"] = args.fault_plan
    if overrides:
        merged = {f.name: getattr(config, f.name)
                  for f in fields(ExperimentConfig)}
        merged.update(overrides)
        config = ExperimentConfig(**merged)
    return config


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        if args.command == "simulate":
            return cmd_simulate(config)
        if args.command == "pipeline":
            return cmd_pipeline(config)
        if args.command == "learn":
            return cmd_learn(config)
        if args.command == "evaluate":
            return cmd_evaluate(config)
        if args.command == "report":
            return cmd_report(config)
        if args.command == "serve":
            return cmd_serve(config, args.host, args.port, args.max_seconds)
        if args.command == "predict":
            return cmd_predict(config, args.entity, args.as_entity,
                               args.x, args.y, args.t, args.host, args.port)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except AuthError as exc:
        print(f"authorization error: {exc}", file=sys.stderr)
        return 4
    except (PipelineError, NotFoundError, NoStructureError,
            EmptyDatasetError, ContractViolationError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
