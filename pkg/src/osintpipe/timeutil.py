"""Time helpers: RFC 3339 UTC timestamps (seconds precision) and short durations."""

from __future__ import annotations

import re
from datetime import datetime, timedelta, timezone

UTC = timezone.utc

_DURATION_RE = re.compile(r"^(\d+)([smhd])$")
_UNIT_SECONDS = {"s": 1, "m": 60, "h": 3600, "d": 86400}


def utcnow() -> datetime:
    return datetime.now(tz=UTC).replace(microsecond=0)


def to_rfc3339(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=UTC)
    return dt.astimezone(UTC).replace(microsecond=0).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_rfc3339(text: str) -> datetime:
    """Parse an RFC 3339 timestamp; naive values are taken as UTC."""
    dt = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=UTC)
    return dt.astimezone(UTC).replace(microsecond=0)


def parse_duration(text: str) -> timedelta:
    """Parse '<n><unit>' with unit one of s/m/h/d, e.g. '30s', '24h'."""
    m = _DURATION_RE.match(text.strip())
    if not m:
        raise ValueError(f"bad duration: {text!r}")
    return timedelta(seconds=int(m.group(1)) * _UNIT_SECONDS[m.group(2)])


def format_duration(delta: timedelta) -> str:
    secs = int(delta.total_seconds())
    for unit, size in (("d", 86400), ("h", 3600), ("m", 60)):
        if secs >= size and secs % size == 0:
            return f"{secs // size}{unit}"
    return f"{secs}s"


def epoch_floor(dt: datetime, span: timedelta) -> datetime:
    """Align down to a span boundary measured from the Unix epoch."""
    span_s = int(span.total_seconds())
    ts = int(dt.timestamp())
    return datetime.fromtimestamp(ts - ts % span_s, tz=UTC)
