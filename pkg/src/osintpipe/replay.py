"""Hermetic replay source speaking the live poller's wire shape.

Live credentials are out of scope, so tests and the `poll --replay` mode
run against a fixture directory holding `events.json`: a list of
`{"id","text","created_at","author_id"}` objects with ascending ids.  The
source answers `since_id`-windowed pages exactly like the real endpoint
and keeps a ledger of everything it has served, which tests use as the
exactly-once oracle.
"""

from __future__ import annotations

import json
import random
from datetime import datetime, timedelta
from pathlib import Path

from .timeutil import to_rfc3339, utcnow

DEFAULT_PAGE_SIZE = 10

EVENTS_FILENAME = "events.json"


def _id_key(value: str):
    return (0, int(value)) if str(value).isdigit() else (1, str(value))


class ReplaySource:
    """In-process stand-in for the polled REST endpoint.

    Calling it is the transport contract: (url, params, headers) ->
    (status, body). Optional `fault_plan` is a list of status codes served
    before each successful page (e.g. [429, 429] to exercise backoff).
    """

    def __init__(self, directory: str | Path, page_size: int = DEFAULT_PAGE_SIZE,
                 fault_plan: list[int] | None = None):
        self.dir = Path(directory)
        self.page_size = page_size
        self.events = json.loads((self.dir / EVENTS_FILENAME).read_text(encoding="utf-8"))
        self.events.sort(key=lambda e: _id_key(e["id"]))
        self.served_ids: set[str] = set()
        self.requests = 0
        self._faults = list(fault_plan or [])

    def __call__(self, url: str, params: dict, headers: dict) -> tuple[int, bytes]:
        self.requests += 1
        if self._faults:
            return self._faults.pop(0), b""
        since = params.get("since_id")
        pending = self.events
        if since is not None:
            pending = [e for e in pending if _id_key(e["id"]) > _id_key(since)]
        page = pending[: self.page_size]
        body = {
            "data": page,
            "meta": {"newest_id": page[-1]["id"]} if page else {},
        }
        self.served_ids.update(str(e["id"]) for e in page)
        return 200, json.dumps(body).encode()

    @property
    def all_ids(self) -> set[str]:
        return {str(e["id"]) for e in self.events}


_SAMPLE_TEXTS = [
    "you are such a lo$er nobody likes you",
    "what a sh!t take, delete your account",
    "she is a slut everyone knows it",
    "posting his home address tonight, watch out",
    "leaked photos of my ex, serves her right",
    "I am watching you, saw you leave work at 5",
    "nice weather today, going for a run",
    "anyone else excited for the game tonight?",
    "that fat a$$ jerk blocked me again",
    "new phone who dis",
]


def generate_replay_fixture(directory: str | Path, count: int = 30, seed: int = 7,
                            start_id: int = 1000,
                            base_time: datetime | None = None) -> Path:
    """Write a deterministic events.json fixture for replay tests.

    Event times start at `base_time` (default: an hour ago), spaced 30s
    apart, so they validate against whichever clock the poller runs on.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    base = base_time or (utcnow() - timedelta(hours=1))
    events = []
    for i in range(count):
        events.append(
            {
                "id": str(start_id + i),
                "text": rng.choice(_SAMPLE_TEXTS),
                "created_at": to_rfc3339(base + timedelta(seconds=30 * i)),
                "author_id": f"user{rng.randrange(100, 999)}",
            }
        )
    path = directory / EVENTS_FILENAME
    path.write_text(json.dumps(events, indent=1), encoding="utf-8")
    return path
