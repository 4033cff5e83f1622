"""Shared domain vocabulary: raw and indexed events, categories, time ranges,
and the canonical line-delimited JSON persistence encoding.

All types here are immutable values after construction and safe to share
across concurrent readers.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from enum import Enum
from typing import Any, Mapping

from .timeutil import parse_rfc3339, to_rfc3339, utcnow

try:
    import regex as _regex
except ImportError:  # pragma: no cover - regex is a declared dependency
    _regex = None

TWEET_GRAPHEME_LIMIT = 280
INGEST_CLOCK_SKEW = timedelta(minutes=5)

SOURCE_KINDS = ("twitter-live", "rest-generic", "csv-dataset")

#: sourcetype field value per ingestion origin
SOURCETYPE_BY_KIND = {
    "twitter-live": "twitter",
    "rest-generic": "rest",
    "csv-dataset": "csv",
}


class Category(Enum):
    """The five cyberbullying categories plus Unclassified.

    Enum values are the canonical display names, which match the dataset's
    `Class` labels.
    """

    SEXUAL_HARASSMENT = "Sexual Harassment"
    DOXING = "Doxing"
    SLUT_SHAMING = "Slut Shaming"
    REVENGE_PORN = "Revenge Porn"
    CYBERSTALKING = "Cyberstalking"
    UNCLASSIFIED = "Unclassified"

    @property
    def display_name(self) -> str:
        return self.value

    @property
    def slug(self) -> str:
        return self.value.lower().replace(" ", "-")


#: the five real categories, in declaration order (Unclassified excluded)
NAMED_CATEGORIES = tuple(c for c in Category if c is not Category.UNCLASSIFIED)

_LABEL_TO_CATEGORY = {c.value.lower(): c for c in Category}


def category_from_label(label: str) -> Category:
    """Map a dataset label to a Category, case-insensitively and tolerating
    irregular whitespace. Unrecognized labels map to Unclassified."""
    canon = " ".join(label.split()).lower()
    return _LABEL_TO_CATEGORY.get(canon, Category.UNCLASSIFIED)


def category_from_slug(slug: str) -> Category | None:
    s = slug.strip().lower()
    for c in Category:
        if c.slug == s:
            return c
    return None


def grapheme_length(text: str) -> int:
    """Count user-perceived characters (grapheme clusters), not code points."""
    if _regex is not None:
        return len(_regex.findall(r"\X", text))
    # crude fallback: skip combining marks and zero-width joiners
    count = 0
    skip_next = False
    for ch in text:
        if skip_next:
            skip_next = False
            continue
        if ch == "‍":
            skip_next = True
            continue
        if unicodedata.combining(ch) or "︀" <= ch <= "️":
            continue
        count += 1
    return count


@dataclass(frozen=True)
class RawEvent:
    """One social-media event as received from a source, before indexing."""

    source_kind: str
    external_id: str
    event_time: datetime
    author: str
    text: str
    extra_fields: Mapping[str, str] = field(default_factory=dict)


def validate_raw_event(e: RawEvent, now: datetime | None = None) -> list[str]:
    """Check every RawEvent invariant; return the names of violated ones.

    An empty list means the event is valid. Never raises.
    """
    now = now or utcnow()
    violations = []
    if e.source_kind not in SOURCE_KINDS:
        violations.append("source-kind-unknown")
    if not e.external_id:
        violations.append("external-id-empty")
    if e.source_kind == "twitter-live" and grapheme_length(e.text) > TWEET_GRAPHEME_LIMIT:
        violations.append("text-length")
    if e.event_time > now + INGEST_CLOCK_SKEW:
        violations.append("event-time-future")
    return violations


@dataclass(frozen=True)
class MatchResult:
    """One category hit from the classifier: which lexicon entries matched
    and where the earliest match starts in the token stream."""

    category: Category
    matched_entries: tuple[str, ...]
    first_offset: int
    score: int

    def __post_init__(self):
        if self.category is Category.UNCLASSIFIED:
            raise ValueError("MatchResult category must not be Unclassified")
        if self.score < 1 or not self.matched_entries:
            raise ValueError("MatchResult requires at least one matched entry")


@dataclass(frozen=True)
class IndexedEvent:
    """The unit of storage and search: a validated event plus derived fields,
    normalized tokens, and classifier matches."""

    event_id: int
    ingest_time: datetime
    raw: RawEvent
    fields: Mapping[str, str]
    tokens: tuple[str, ...]
    categories: frozenset[MatchResult]

    @property
    def event_time(self) -> datetime:
        return self.raw.event_time

    def category_names(self) -> list[str]:
        return sorted(m.category.value for m in self.categories)


@dataclass(frozen=True)
class TimeRange:
    """Closed time interval; either bound may be None for unbounded."""

    earliest: datetime | None = None
    latest: datetime | None = None

    def __post_init__(self):
        if self.earliest is not None and self.latest is not None:
            if self.earliest > self.latest:
                raise ValueError("TimeRange earliest must be <= latest")

    def contains(self, t: datetime) -> bool:
        if self.earliest is not None and t < self.earliest:
            return False
        if self.latest is not None and t > self.latest:
            return False
        return True


ALL_TIME = TimeRange(None, None)


# --- canonical persistence encoding -------------------------------------
#
# One event per line: a JSON object with keys event_id, ingest_time,
# event_time, source_kind, external_id, author, text, fields, categories.
# Timestamps are RFC 3339 UTC.  Tokens are not stored; they are re-derived
# from the text on decode.

_RESERVED_FIELDS = ("sourcetype", "Tweet", "Class")


def encode_event(e: IndexedEvent) -> str:
    cats = [
        {
            "category": m.category.value,
            "matched_entries": list(m.matched_entries),
            "first_offset": m.first_offset,
            "score": m.score,
        }
        for m in sorted(e.categories, key=lambda m: m.category.value)
    ]
    obj = {
        "event_id": e.event_id,
        "ingest_time": to_rfc3339(e.ingest_time),
        "event_time": to_rfc3339(e.raw.event_time),
        "source_kind": e.raw.source_kind,
        "external_id": e.raw.external_id,
        "author": e.raw.author,
        "text": e.raw.text,
        "fields": dict(e.fields),
        "categories": cats,
    }
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def decode_event(line: str) -> IndexedEvent:
    from .lexicon import normalize, tokenize  # deferred: lexicon imports Category

    obj = json.loads(line)
    fields = dict(obj["fields"])
    # extra_fields cannot be recovered exactly (reserved keys are merged in at
    # index time); the best reconstruction is fields minus the reserved trio.
    extra = {k: v for k, v in fields.items() if k not in _RESERVED_FIELDS}
    raw = RawEvent(
        source_kind=obj["source_kind"],
        external_id=obj["external_id"],
        event_time=parse_rfc3339(obj["event_time"]),
        author=obj["author"],
        text=obj["text"],
        extra_fields=extra,
    )
    cats = frozenset(
        MatchResult(
            category=category_from_label(c["category"]),
            matched_entries=tuple(c["matched_entries"]),
            first_offset=c["first_offset"],
            score=c["score"],
        )
        for c in obj["categories"]
    )
    return IndexedEvent(
        event_id=obj["event_id"],
        ingest_time=parse_rfc3339(obj["ingest_time"]),
        raw=raw,
        fields=fields,
        tokens=tuple(tokenize(normalize(obj["text"]))),
        categories=cats,
    )


def with_event_id(e: IndexedEvent, event_id: int) -> IndexedEvent:
    return replace(e, event_id=event_id)
