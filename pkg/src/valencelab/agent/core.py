"""On-device agent: duty-cycled feed, debounced reports, empathy score,
duplicate-forgetting store, homeostasis, and crash/revive lifecycle.

The agent is a plain state machine advanced by simulated time. Nothing here
spawns threads; the surrounding loop decides when ticks and checks happen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from ..errors import ContractViolationError
from ..simworld import LABELS

log = logging.getLogger(__name__)

# calibrated so the default 20% duty cycle drains 1% battery per day:
# 0.2 * 86400 s active per day, 1.0 (percent) / 17280 per active second
DEFAULT_ENERGY_PER_ACTIVE_S = 1.0 / 17280.0

DEBOUNCE_WINDOW_S = 60.0
DEDUPE_CELL = 1.0


@dataclass(frozen=True)
class FeedConfig:
    """Sensing rhythm: `active_s` on, `inactive_s` off, repeated."""

    active_s: float = 2.0
    inactive_s: float = 8.0
    sample_hz: float = 0.2
    energy_per_active_second: float = DEFAULT_ENERGY_PER_ACTIVE_S

    def __post_init__(self):
        for name in ("active_s", "inactive_s", "sample_hz",
                     "energy_per_active_second"):
            if getattr(self, name) <= 0:
                raise ContractViolationError(f"{name} must be > 0")

    @property
    def period_s(self) -> float:
        return self.active_s + self.inactive_s

    @property
    def duty_cycle(self) -> float:
        return self.active_s / self.period_s

    @property
    def samples_per_period(self) -> int:
        return max(1, round(self.sample_hz * self.period_s))


@dataclass
class EmpathyState:
    """Displayed rapport score: exponential decay plus per-report bumps."""

    score: float = 50.0
    half_life_h: float = 48.0
    last_update: float = 0.0
    increment_per_report: float = 5.0
    pending_increment: float = 0.0


def update_empathy(state: EmpathyState, now: float) -> float:
    """Apply decay since last_update plus accumulated report bumps."""
    if now < state.last_update:
        raise ContractViolationError("empathy updates must move forward in time")
    dt_h = (now - state.last_update) / 3600.0
    decayed = state.score * 2.0 ** (-dt_h / state.half_life_h)
    state.score = min(max(decayed + state.pending_increment, 0.0), 100.0)
    state.pending_increment = 0.0
    state.last_update = now
    return state.score


@dataclass(frozen=True)
class Record:
    """One stored observation, sensor or report or text."""

    uuid: str
    kind: str
    t: float
    x: float
    y: float
    payload: str

    def to_dict(self) -> dict:
        return {"uuid": self.uuid, "kind": self.kind, "t": self.t,
                "x": self.x, "y": self.y, "payload": self.payload}

    @classmethod
    def from_dict(cls, d: dict) -> "Record":
        return cls(d["uuid"], d["kind"], d["t"], d["x"], d["y"], d["payload"])


class LocalStore:
    """Pending/synced record store with batch bookkeeping.

    `pending` records have not been acknowledged by the cloud side; `synced`
    maps uuid to ack time and is pruned after the persistence limit. Batch
    draining and acking live in the sync layer; this class only owns state.
    """

    def __init__(self, entity_id: str = "", persistence_limit_h: float = 168.0):
        self.entity_id = entity_id
        self.persistence_limit_h = persistence_limit_h
        self.pending: list[Record] = []
        self.synced: dict[str, float] = {}
        self.synced_records: dict[str, Record] = {}
        # id-only ledger of everything ever acked; unlike synced_records it
        # survives pruning, so delivery accounting stays possible
        self.ever_synced: set[str] = set()
        self.open_batches: dict[int, tuple[str, ...]] = {}
        self.acked_batches: set[int] = set()
        self._next_batch_id = 1
        self._last_dedupe: dict[str, tuple] = {}

    def next_batch_id(self) -> int:
        bid = self._next_batch_id
        self._next_batch_id += 1
        return bid

    def in_flight(self, uuid: str) -> bool:
        return any(uuid in uuids for uuids in self.open_batches.values())

    def add_pending(self, record: Record) -> None:
        self.pending.append(record)

    def remove_pending(self, uuid: str) -> bool:
        for i, rec in enumerate(self.pending):
            if rec.uuid == uuid:
                del self.pending[i]
                return True
        return False

    def mark_synced(self, uuid: str, ack_time: float) -> bool:
        for i, rec in enumerate(self.pending):
            if rec.uuid == uuid:
                del self.pending[i]
                self.synced[uuid] = ack_time
                self.synced_records[uuid] = rec
                self.ever_synced.add(uuid)
                return True
        return False

    def prune_synced(self, now: float) -> int:
        limit_s = self.persistence_limit_h * 3600.0
        stale = [u for u, t in self.synced.items() if now - t > limit_s]
        for u in stale:
            del self.synced[u]
            self.synced_records.pop(u, None)
        return len(stale)


def dedupe_store(store: LocalStore, record: Record):
    """Store, unless identical in (kind, payload, location cell) to the
    immediately preceding stored record of that kind."""
    cell = (math.floor(record.x / DEDUPE_CELL),
            math.floor(record.y / DEDUPE_CELL))
    key = (record.payload, cell)
    if store._last_dedupe.get(record.kind) == key:
        return "forgotten", None
    store._last_dedupe[record.kind] = key
    store.add_pending(record)
    return "stored", record


@dataclass(frozen=True)
class SensorReading:
    t: float
    kind: str = "sample"
    payload: str = ""


@dataclass
class AgentStatus:
    state: str = "running"
    feed_alive: bool = True
    last_homeostasis: float = 0.0
    check_interval_min: float = 15.0
    user_interacting: bool = False


class SensingAgent:
    """Per-entity agent state; all behavior goes through the module ops."""

    def __init__(self, entity_id: str, feed: FeedConfig | None = None,
                 empathy: EmpathyState | None = None,
                 store: LocalStore | None = None,
                 status: AgentStatus | None = None,
                 debounce_window_s: float = DEBOUNCE_WINDOW_S,
                 start_t: float = 0.0):
        self.entity_id = entity_id
        self.feed = feed or FeedConfig()
        self.empathy = empathy or EmpathyState(last_update=start_t)
        self.store = store or LocalStore(entity_id)
        self.status = status or AgentStatus(last_homeostasis=start_t)
        self.debounce_window_s = debounce_window_s
        self.energy_spent = 0.0
        self.active_seconds_total = 0.0
        self._feed_last_t = start_t
        # debounce winner per window: window index -> (uuid, timestamp)
        self._window_reports: dict[int, tuple[str, float]] = {}
        self._click_seq = 0


def _active_overlap(t0: float, t1: float, active: float, period: float) -> float:
    """Seconds of [t0, t1) inside the active window of each period."""
    if t1 <= t0:
        return 0.0
    k0 = math.floor(t0 / period)
    k1 = math.floor(t1 / period)
    if k0 == k1:
        a = k0 * period
        return max(0.0, min(t1, a + active) - max(t0, a))
    head = max(0.0, k0 * period + active - max(t0, k0 * period))
    head = min(head, active)
    full = (k1 - k0 - 1) * active
    tail = max(0.0, min(t1 - k1 * period, active))
    return head + full + tail


def feed_tick(agent: SensingAgent, clock) -> tuple[list[SensorReading], float]:
    """Advance the feed to clock.now; emit samples and spend energy for the
    active time covered. A crashed agent spends nothing but time still passes.
    """
    now = clock.now
    t0, agent._feed_last_t = agent._feed_last_t, now
    if agent.status.state != "running" or not agent.status.feed_alive:
        return [], 0.0
    cfg = agent.feed
    active = _active_overlap(t0, now, cfg.active_s, cfg.period_s)
    energy = active * cfg.energy_per_active_second
    agent.energy_spent += energy
    agent.active_seconds_total += active
    readings: list[SensorReading] = []
    step = cfg.active_s / cfg.samples_per_period
    k0 = math.floor(t0 / cfg.period_s)
    k1 = math.floor(now / cfg.period_s)
    for k in range(k0, k1 + 1):
        base = k * cfg.period_s
        for j in range(cfg.samples_per_period):
            ts = base + j * step
            if t0 <= ts < now:
                readings.append(SensorReading(t=ts))
    return readings, energy


def ingest_report(agent: SensingAgent, click: str, timestamp: float,
                  location=(0.0, 0.0), uuid: str | None = None):
    """Store a valence click; within one debounce window only the
    chronologically last click survives. Every click bumps empathy."""
    if click not in LABELS:
        raise ContractViolationError(f"unknown valence class {click!r}")
    agent.empathy.pending_increment += agent.empathy.increment_per_report
    if uuid is None:
        uuid = f"{agent.entity_id}:c{agent._click_seq:05d}"
        agent._click_seq += 1
    record = Record(uuid=uuid, kind="report", t=timestamp,
                    x=float(location[0]), y=float(location[1]), payload=click)
    window = math.floor(timestamp / agent.debounce_window_s)
    prev = agent._window_reports.get(window)
    if prev is not None:
        prev_uuid, prev_t = prev
        # an in-flight record was already transmitted; the correction has to
        # stand on its own
        if not agent.store.in_flight(prev_uuid):
            if timestamp >= prev_t:
                agent.store.remove_pending(prev_uuid)
            else:
                return "superseded", None
    agent.store.add_pending(record)
    agent._window_reports[window] = (uuid, timestamp)
    return "stored", record


def homeostasis_check(agent: SensingAgent, now: float) -> list[str]:
    """Periodic self-check; returns the repair/maintenance actions taken."""
    if agent.status.state != "running":
        raise ContractViolationError("homeostasis runs only on a running agent")
    interval_s = agent.status.check_interval_min * 60.0
    if now - agent.status.last_homeostasis < interval_s:
        raise ContractViolationError("homeostasis called before its interval")
    agent.status.last_homeostasis = now
    actions: list[str] = []
    if not agent.status.feed_alive:
        agent.status.feed_alive = True
        agent._feed_last_t = now
        actions.append("restart_feed")
    elif agent.status.user_interacting:
        update_empathy(agent.empathy, now)
        actions.append("update_notification")
    else:
        agent.store.prune_synced(now)
        actions.append("run_db_maintenance")
    return actions


def on_system_event(agent: SensingAgent, event: str,
                    now: float | None = None) -> AgentStatus:
    """Lifecycle transitions: crash is absorbing until boot or revive_tick."""
    if event == "crash":
        agent.status.state = "crashed"
        agent.status.feed_alive = False
    elif event in ("boot", "revive_tick"):
        was_crashed = agent.status.state == "crashed"
        agent.status.state = "running"
        agent.status.feed_alive = True
        if now is not None:
            # no retroactive sampling for the dead interval
            agent._feed_last_t = now
            if was_crashed:
                agent.status.last_homeostasis = now
    else:
        raise ContractViolationError(f"unknown system event {event!r}")
    return agent.status
