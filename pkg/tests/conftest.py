import sys
import threading
from datetime import datetime, timedelta
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from osintpipe.lexicon import load_lexicon
from osintpipe.store import EventStore
from osintpipe.timeutil import UTC

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "osintpipe" / "fixtures"

FIXTURE_CSV = FIXTURES / "cyberbullying_fixture.csv"
FIXTURE_LEXICON = FIXTURES / "lexicon.txt"
FIXTURE_REPLAY = FIXTURES / "replay"

TEST_MASTER_KEY = b"\x11" * 32


@pytest.fixture(scope="session")
def lexicon():
    return load_lexicon(FIXTURE_LEXICON)


@pytest.fixture
def store(tmp_path):
    s = EventStore(tmp_path / "store", master_key_provider=lambda: TEST_MASTER_KEY)
    yield s
    s.close()


@pytest.fixture
def store_factory(tmp_path):
    """Reopenable store over a stable directory (crash/restart tests)."""
    opened = []

    def open_store(name="store", **kwargs):
        s = EventStore(tmp_path / name, master_key_provider=lambda: TEST_MASTER_KEY, **kwargs)
        opened.append(s)
        return s

    yield open_store
    for s in opened:
        s.close()


class SimClock:
    """Deterministic clock for poller tests: waits advance time instantly.

    An optional deadline emulates "run for N seconds": any wait that would
    cross it sets the stop event and pins time at the deadline.
    """

    def __init__(self, start: datetime, deadline: datetime | None = None,
                 stop: threading.Event | None = None):
        self.t = start
        self.deadline = deadline
        self.stop = stop
        self.sleeps: list[float] = []

    def now(self) -> datetime:
        return self.t

    def wait(self, seconds: float, stop: threading.Event | None = None) -> bool:
        self.sleeps.append(seconds)
        target = self.t + timedelta(seconds=seconds)
        if self.deadline is not None and target >= self.deadline:
            self.t = self.deadline
            if self.stop is not None:
                self.stop.set()
            return True
        self.t = target
        ev = stop or self.stop
        return bool(ev and ev.is_set())


def ts(*args) -> datetime:
    """Shorthand UTC datetime."""
    return datetime(*args, tzinfo=UTC)
