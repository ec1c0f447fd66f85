"""On-device agent: sensing feed, report debounce, empathy, local store,
homeostasis, crash recovery, and the text sentiment heuristic."""

from .core import (
    DEBOUNCE_WINDOW_S,
    DEFAULT_ENERGY_PER_ACTIVE_S,
    AgentStatus,
    EmpathyState,
    FeedConfig,
    LocalStore,
    Record,
    SensingAgent,
    SensorReading,
    dedupe_store,
    feed_tick,
    homeostasis_check,
    ingest_report,
    on_system_event,
    update_empathy,
)
from .sentiment import (
    EMOTICONS,
    EN_LEXICON,
    PT_LEXICON,
    SENTIMENT_THRESHOLD,
    analyze_sentiment,
    detect_language,
)

__all__ = [
    "DEBOUNCE_WINDOW_S",
    "DEFAULT_ENERGY_PER_ACTIVE_S",
    "AgentStatus",
    "EmpathyState",
    "FeedConfig",
    "LocalStore",
    "Record",
    "SensingAgent",
    "SensorReading",
    "dedupe_store",
    "feed_tick",
    "homeostasis_check",
    "ingest_report",
    "on_system_event",
    "update_empathy",
    "EMOTICONS",
    "EN_LEXICON",
    "PT_LEXICON",
    "SENTIMENT_THRESHOLD",
    "analyze_sentiment",
    "detect_language",
]
