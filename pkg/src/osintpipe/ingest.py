"""Ingestion paths into the store: the batch CSV dataset loader and the
rate-limited, checkpointed REST poller.

Both funnel every event through the same validate -> classify -> append
pipeline (`index_event`), so deduplication and classification behave
identically regardless of source.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import random
import threading
import time as _time
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable
from urllib.parse import urlsplit

from .lexicon import Lexicon, classify, normalize, tokenize
from .model import (
    IndexedEvent,
    RawEvent,
    SOURCETYPE_BY_KIND,
    category_from_label,
    validate_raw_event,
)
from .store import DuplicateEventError, EventStore
from .timeutil import parse_rfc3339, utcnow

BACKOFF_BASE = 2.0
BACKOFF_FACTOR = 2.0
BACKOFF_CAP = 300.0


class IngestError(Exception):
    pass


class MissingColumnError(IngestError):
    pass


class PollerAuthError(IngestError):
    """401/403 from the endpoint; the poller halts and needs an operator."""


# --- the shared pipeline step ---------------------------------------------


def build_fields(raw: RawEvent) -> dict[str, str]:
    fields = {
        "sourcetype": SOURCETYPE_BY_KIND.get(raw.source_kind, "rest"),
        "Tweet": raw.text,
    }
    for name, value in raw.extra_fields.items():
        if name == "Class":
            fields["Class"] = category_from_label(value).value
        elif name not in fields:
            fields[name] = value
    return fields


def index_event(
    store: EventStore,
    lex: Lexicon,
    raw: RawEvent,
    now: datetime | None = None,
) -> tuple[str, int | list[str] | None]:
    """Validate, classify and append one raw event.

    Returns ("ok", event_id), ("duplicate", None), or
    ("violation", [names...]). Never raises for per-event problems.
    """
    violations = validate_raw_event(raw, now=now)
    if violations:
        return "violation", violations
    tokens = tuple(tokenize(normalize(raw.text)))
    cats = classify(tokens, lex)
    event = IndexedEvent(
        event_id=0,
        ingest_time=now or utcnow(),
        raw=raw,
        fields=build_fields(raw),
        tokens=tokens,
        categories=cats,
    )
    try:
        return "ok", store.append(event)
    except DuplicateEventError:
        return "duplicate", None


# --- CSV dataset loader ---------------------------------------------------


@dataclass(frozen=True)
class IngestReport:
    ok: int
    rejected: int
    violations: tuple[str, ...]


def load_csv(
    store: EventStore,
    lex: Lexicon,
    path: str | Path,
    text_col: str = "Tweet",
    label_col: str = "Class",
    now: datetime | None = None,
) -> IngestReport:
    """Load a labeled CSV dataset (RFC 4180, header row required).

    Each row becomes one csv-dataset event with external_id
    `<file-hash>:<row-number>`, making reloads idempotent. Malformed rows
    are rejected and counted without aborting the batch; a missing mapped
    column aborts before any append.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"file not found: {path}")
    file_hash = hashlib.sha256(path.read_bytes()).hexdigest()[:12]
    ok = 0
    violations: list[str] = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (text_col, label_col):
            if col not in header:
                raise MissingColumnError(f"CSV is missing mapped column {col!r}")
        for row_no, row in enumerate(reader, start=1):
            text = (row.get(text_col) or "").strip()
            if not text:
                violations.append(f"row {row_no}: empty-text")
                continue
            extra = {}
            for name, value in row.items():
                if name is None or name == text_col or value is None:
                    continue
                extra["Class" if name == label_col else name] = value
            event_time = now or utcnow()
            if "event_time" in extra:
                try:
                    event_time = parse_rfc3339(extra["event_time"])
                except ValueError:
                    pass
            raw = RawEvent(
                source_kind="csv-dataset",
                external_id=f"{file_hash}:{row_no}",
                event_time=event_time,
                author=row.get("author", "") or "",
                text=text,
                extra_fields=extra,
            )
            status, detail = index_event(store, lex, raw, now=now)
            if status == "ok":
                ok += 1
            elif status == "duplicate":
                violations.append(f"row {row_no}: duplicate")
            else:
                violations.append(f"row {row_no}: {','.join(detail)}")
    return IngestReport(ok=ok, rejected=len(violations), violations=tuple(violations))


# --- rate limiter -----------------------------------------------------------


class RateLimiter:
    """Sliding-window request budget: in any window of the configured
    length, issued requests never exceed the budget."""

    def __init__(self, window: timedelta, budget: int):
        if budget < 1:
            raise ValueError("budget must be positive")
        self.window = window
        self.budget = budget
        self.spent: list[datetime] = []

    def _prune(self, now: datetime) -> None:
        cutoff = now - self.window
        self.spent = [t for t in self.spent if t > cutoff]

    def try_acquire(self, now: datetime) -> bool:
        self._prune(now)
        if len(self.spent) < self.budget:
            self.spent.append(now)
            return True
        return False

    def next_allowed(self, now: datetime) -> datetime:
        self._prune(now)
        if len(self.spent) < self.budget:
            return now
        return self.spent[0] + self.window


# --- poller -----------------------------------------------------------------


@dataclass
class PollerConfig:
    endpoint_url: str
    auth_secret_name: str = "twitter-bearer"
    poll_interval: timedelta = timedelta(seconds=30)
    rate_budget: int = 5
    rate_window: timedelta = timedelta(seconds=60)
    query_terms: tuple[str, ...] = ()
    source_kind: str = "twitter-live"
    checkpoint: str | None = None
    state_path: Path | None = None

    def __post_init__(self):
        scheme = urlsplit(self.endpoint_url).scheme
        if scheme != "https":
            raise ValueError("poller endpoint must use https")
        if self.rate_budget < 1:
            raise ValueError("rate budget must be positive")
        if self.poll_interval < timedelta(seconds=1):
            raise ValueError("poll interval must be at least 1s")

    @classmethod
    def from_json(cls, obj: dict) -> "PollerConfig":
        return cls(
            endpoint_url=obj["endpoint_url"],
            auth_secret_name=obj.get("auth_secret_name", "twitter-bearer"),
            poll_interval=timedelta(seconds=obj.get("poll_interval_s", 30)),
            rate_budget=obj.get("rate_budget", 5),
            rate_window=timedelta(seconds=obj.get("rate_window_s", 60)),
            query_terms=tuple(obj.get("query_terms", ())),
            source_kind=obj.get("source_kind", "twitter-live"),
            state_path=Path(obj["state_path"]) if obj.get("state_path") else None,
        )


class PollerState:
    """Persisted since-marker (poller-state.json)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def load(self) -> str | None:
        if not self.path.exists():
            return None
        return json.loads(self.path.read_text(encoding="utf-8")).get("checkpoint")

    def save(self, checkpoint: str | None) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"checkpoint": checkpoint}), encoding="utf-8")
        os.replace(tmp, self.path)


class SystemClock:
    def now(self) -> datetime:
        return utcnow()

    def wait(self, seconds: float, stop: threading.Event | None = None) -> bool:
        """Sleep; returns True if the stop signal fired during the wait."""
        if stop is None:
            _time.sleep(seconds)
            return False
        return stop.wait(seconds)


def backoff_delay(attempt: int, rng: random.Random) -> float:
    """Full-jitter exponential backoff: uniform over [0, min(cap, base*factor^n)]."""
    limit = min(BACKOFF_CAP, BACKOFF_BASE * (BACKOFF_FACTOR ** attempt))
    return rng.uniform(0.0, limit)


def _id_sort_key(external_id: str):
    return (0, int(external_id)) if external_id.isdigit() else (1, external_id)


def https_transport(bearer: str) -> Callable[[str, dict, dict], tuple[int, bytes]]:
    """Real network transport (requests); used outside tests."""
    import requests

    def call(url: str, params: dict, headers: dict) -> tuple[int, bytes]:
        merged = {"Authorization": f"Bearer {bearer}", **headers}
        resp = requests.get(url, params=params, headers=merged, timeout=30)
        return resp.status_code, resp.content

    return call


def page_to_raw_events(page: dict, source_kind: str, now: datetime) -> list[RawEvent]:
    events = []
    for item in page.get("data", []):
        created = item.get("created_at")
        try:
            event_time = parse_rfc3339(created) if created else now
        except ValueError:
            event_time = now
        events.append(
            RawEvent(
                source_kind=source_kind,
                external_id=str(item["id"]),
                event_time=event_time,
                author=str(item.get("author_id", "")),
                text=item.get("text", ""),
            )
        )
    return events


def poll_once(
    cfg: PollerConfig,
    transport: Callable[[str, dict, dict], tuple[int, bytes]],
    clock=None,
    rng: random.Random | None = None,
    stop: threading.Event | None = None,
    audit_hook: Callable[[str, str, str], None] | None = None,
) -> list[RawEvent]:
    """Issue one poll (retrying through 429/network backoff) and return the
    page's events. Advances cfg.checkpoint only on a successful page."""
    clock = clock or SystemClock()
    rng = rng or random.Random()
    attempt = 0
    while True:
        params: dict[str, str] = {}
        if cfg.query_terms:
            params["query"] = " ".join(cfg.query_terms)
        if cfg.checkpoint:
            params["since_id"] = cfg.checkpoint
        try:
            status, body = transport(cfg.endpoint_url, params, {})
        except Exception:
            status, body = None, b""
        if status in (401, 403):
            raise PollerAuthError(f"endpoint returned {status}; poller halted")
        if status == 200:
            now = clock.now()
            try:
                page = json.loads(body)
                if not isinstance(page, dict) or not isinstance(page.get("data", []), list):
                    raise ValueError("page shape")
                events = page_to_raw_events(page, cfg.source_kind, now)
            except (ValueError, KeyError, TypeError):
                # malformed payload: skip the page, keep the checkpoint
                if audit_hook:
                    audit_hook("poll-page-skipped", cfg.endpoint_url, "error")
                return []
            if events:
                newest = page.get("meta", {}).get("newest_id")
                ids = [e.external_id for e in events]
                top = max(ids, key=_id_sort_key)
                if newest is not None:
                    top = max([top, str(newest)], key=_id_sort_key)
                if cfg.checkpoint is None or _id_sort_key(top) > _id_sort_key(cfg.checkpoint):
                    cfg.checkpoint = top
            return events
        # 429 or transient failure: exponential backoff, checkpoint untouched
        delay = backoff_delay(attempt, rng)
        attempt += 1
        if clock.wait(delay, stop):
            return []


def run_poller(
    cfg: PollerConfig,
    store: EventStore,
    lex: Lexicon,
    transport: Callable[[str, dict, dict], tuple[int, bytes]],
    stop: threading.Event,
    clock=None,
    rng: random.Random | None = None,
    state: PollerState | None = None,
    audit_hook: Callable[[str, str, str], None] | None = None,
) -> int:
    """Poll on the configured interval under the rate limiter, pushing
    events through validate -> classify -> append until stopped.

    The checkpoint is persisted only after the batch is durably appended,
    so a crash replays the tail and the store's dedup makes ingest
    exactly-once. Returns the number of events appended.
    """
    clock = clock or SystemClock()
    rng = rng or random.Random()
    limiter = RateLimiter(cfg.rate_window, cfg.rate_budget)
    if state is not None and cfg.checkpoint is None:
        cfg.checkpoint = state.load()
    appended = 0
    last_poll: datetime | None = None
    while not stop.is_set():
        now = clock.now()
        wait_until = now
        if last_poll is not None:
            wait_until = max(wait_until, last_poll + cfg.poll_interval)
        wait_until = max(wait_until, limiter.next_allowed(now))
        if wait_until > now:
            if clock.wait((wait_until - now).total_seconds(), stop):
                break
        now = clock.now()
        if stop.is_set():
            break
        if not limiter.try_acquire(now):
            continue
        last_poll = now
        events = poll_once(cfg, transport, clock=clock, rng=rng, stop=stop,
                           audit_hook=audit_hook)
        for raw in events:
            status, _ = index_event(store, lex, raw, now=clock.now())
            if status == "ok":
                appended += 1
        if events and state is not None:
            state.save(cfg.checkpoint)
    return appended
