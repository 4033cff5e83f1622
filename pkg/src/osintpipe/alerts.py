"""Sliding-window threshold alerting over the indexed event stream.

Rules are edge-triggered: an alert fires when a rule's window count first
reaches its threshold and stays suppressed until the count falls back below
it, so one sustained surge produces exactly one alert.  The alert clock is
event_time, and observe() assumes event times are non-decreasing (it runs
on the store's single-writer append path).
"""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

from .model import Category, IndexedEvent, TimeRange, category_from_label
from .timeutil import parse_rfc3339, to_rfc3339

MIN_WINDOW = timedelta(minutes=1)
SAMPLE_LIMIT = 10


@dataclass(frozen=True)
class AlertRule:
    rule_id: str
    name: str
    category: Category | None  # None means Any
    threshold: int
    window: timedelta
    enabled: bool = True

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        if self.window < MIN_WINDOW:
            raise ValueError("window must be at least 1 minute")

    def matches(self, e: IndexedEvent) -> bool:
        if self.category is None:
            return True
        return any(m.category is self.category for m in e.categories)

    def to_json(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "name": self.name,
            "category": self.category.value if self.category else "Any",
            "threshold": self.threshold,
            "window_s": int(self.window.total_seconds()),
            "enabled": self.enabled,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AlertRule":
        cat_label = obj.get("category", "Any")
        category = None if cat_label == "Any" else category_from_label(cat_label)
        if category is Category.UNCLASSIFIED:
            raise ValueError(f"unknown rule category {cat_label!r}")
        return cls(
            rule_id=obj["rule_id"],
            name=obj["name"],
            category=category,
            threshold=obj["threshold"],
            window=timedelta(seconds=obj["window_s"]),
            enabled=obj.get("enabled", True),
        )


@dataclass(frozen=True)
class AlertEvent:
    alert_id: int
    rule_id: str
    fired_at: datetime
    observed_count: int
    window_start: datetime
    sample_event_ids: tuple[int, ...]
    acknowledged: bool = False

    def to_json(self) -> dict:
        return {
            "alert_id": self.alert_id,
            "rule_id": self.rule_id,
            "fired_at": to_rfc3339(self.fired_at),
            "observed_count": self.observed_count,
            "window_start": to_rfc3339(self.window_start),
            "sample_event_ids": list(self.sample_event_ids),
            "acknowledged": self.acknowledged,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AlertEvent":
        return cls(
            alert_id=obj["alert_id"],
            rule_id=obj["rule_id"],
            fired_at=parse_rfc3339(obj["fired_at"]),
            observed_count=obj["observed_count"],
            window_start=parse_rfc3339(obj["window_start"]),
            sample_event_ids=tuple(obj["sample_event_ids"]),
            acknowledged=obj.get("acknowledged", False),
        )


@dataclass
class _RuleState:
    window: deque = field(default_factory=deque)  # (event_time, event_id)
    latched: bool = False


class AlertEngine:
    """Evaluates alert rules against each indexed event as it is appended.

    Rules live in `<dir>/rules.json`; fired alerts are appended to
    `<dir>/events.log` and survive restarts. observe() is O(1) amortized
    per event per rule via per-rule deques.
    """

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.rules_path = self.dir / "rules.json"
        self.events_path = self.dir / "events.log"
        self._rules: dict[str, AlertRule] = {}
        self._state: dict[str, _RuleState] = {}
        self._alerts: list[AlertEvent] = []
        self._next_alert_id = 1
        self._load()

    def _load(self) -> None:
        if self.rules_path.exists():
            for obj in json.loads(self.rules_path.read_text(encoding="utf-8")):
                rule = AlertRule.from_json(obj)
                self._rules[rule.rule_id] = rule
                self._state[rule.rule_id] = _RuleState()
        if self.events_path.exists():
            for line in self.events_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    alert = AlertEvent.from_json(json.loads(line))
                    self._alerts.append(alert)
                    self._next_alert_id = max(self._next_alert_id, alert.alert_id + 1)

    def _save_rules(self) -> None:
        tmp = self.rules_path.with_suffix(".tmp")
        tmp.write_text(json.dumps([r.to_json() for r in self._rules.values()], indent=1),
                       encoding="utf-8")
        os.replace(tmp, self.rules_path)

    def _rewrite_alerts(self) -> None:
        tmp = self.events_path.with_suffix(".tmp")
        tmp.write_text("".join(json.dumps(a.to_json()) + "\n" for a in self._alerts),
                       encoding="utf-8")
        os.replace(tmp, self.events_path)

    # -- rules -----------------------------------------------------------

    def put_rule(self, rule: AlertRule) -> None:
        self._rules[rule.rule_id] = rule
        self._state.setdefault(rule.rule_id, _RuleState())
        self._save_rules()

    def rules(self) -> list[AlertRule]:
        return list(self._rules.values())

    def get_rule(self, rule_id: str) -> AlertRule | None:
        return self._rules.get(rule_id)

    # -- stream ------------------------------------------------------------

    def observe(self, e: IndexedEvent, now: datetime | None = None) -> list[AlertEvent]:
        """Update every enabled rule's sliding window with this event and
        return any alerts that fire on this observation."""
        fired = []
        t = e.event_time
        for rule in self._rules.values():
            if not rule.enabled or not rule.matches(e):
                continue
            state = self._state[rule.rule_id]
            window = state.window
            cutoff = t - rule.window
            while window and window[0][0] <= cutoff:
                window.popleft()
            # counts only decay between events, so the pre-insert count is the
            # interval minimum: if it dipped below threshold, suppression ends
            if len(window) < rule.threshold:
                state.latched = False
            window.append((t, e.event_id))
            count = len(window)
            if count >= rule.threshold:
                if not state.latched:
                    state.latched = True
                    alert = AlertEvent(
                        alert_id=self._next_alert_id,
                        rule_id=rule.rule_id,
                        fired_at=t,
                        observed_count=count,
                        window_start=cutoff,
                        sample_event_ids=tuple(eid for _, eid in list(window)[-SAMPLE_LIMIT:]),
                    )
                    self._next_alert_id += 1
                    self._alerts.append(alert)
                    with self.events_path.open("a", encoding="utf-8") as fh:
                        fh.write(json.dumps(alert.to_json()) + "\n")
                    fired.append(alert)
        return fired

    # -- queries -----------------------------------------------------------

    def list_alerts(self, rng: TimeRange = TimeRange()) -> list[AlertEvent]:
        out = [a for a in self._alerts if rng.contains(a.fired_at)]
        out.sort(key=lambda a: (a.fired_at, a.alert_id))
        return out

    def unacknowledged_count(self) -> int:
        return sum(1 for a in self._alerts if not a.acknowledged)

    def acknowledge(self, alert_id: int) -> bool:
        for i, alert in enumerate(self._alerts):
            if alert.alert_id == alert_id:
                if not alert.acknowledged:
                    self._alerts[i] = replace(alert, acknowledged=True)
                    self._rewrite_alerts()
                return True
        return False
