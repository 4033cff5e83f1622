"""Obfuscation-folding text normalizer and per-category keyword matcher.

Classification is keyword tracking, not machine learning: a lexicon maps
each category to a set of word/phrase patterns, text is normalized to fold
common symbol obfuscations ("lo$er" -> "loser"), and a pattern matches when
its words line up with a consecutive run of tokens.  Matching is
token-window based, never substring based, so "class" does not match "ass".
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .model import Category, MatchResult, category_from_slug

#: fixed confusable-folding table; configurable per deployment
FOLD_TABLE = {"$": "s", "@": "a", "0": "o", "1": "l", "3": "e", "!": "i"}

_FOLD_TRANS = str.maketrans(FOLD_TABLE)
_WS_RE = re.compile(r"\s+")
# token characters: letters, digits, apostrophe; everything else splits
_SPLIT_RE = re.compile(r"(?:[^\w']|_)+", re.UNICODE)

#: single-character wildcard allowed inside pattern words
WILDCARD = "*"


def normalize(text: str) -> str:
    """Lowercase, fold confusable symbols, collapse whitespace. Idempotent."""
    lowered = text.lower().translate(_FOLD_TRANS)
    return _WS_RE.sub(" ", lowered).strip()


def tokenize(text: str) -> list[str]:
    """Split already-normalized text on any character that is not a letter,
    digit, or apostrophe; empty tokens are dropped, order preserved."""
    return [t for t in _SPLIT_RE.split(text) if t]


class LexiconError(Exception):
    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class LexiconEntry:
    """One keyword/phrase pattern for a category.

    The pattern is stored pre-normalized; each word may contain `*`, which
    matches exactly one word character at that position.
    """

    category: Category
    pattern: str

    def __post_init__(self):
        if self.category is Category.UNCLASSIFIED:
            raise ValueError("lexicon entries must not use Unclassified")

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(self.pattern.split(" "))


@dataclass(frozen=True)
class Lexicon:
    version: int = 1
    entries: tuple[LexiconEntry, ...] = field(default_factory=tuple)


EMPTY_LEXICON = Lexicon()

def _valid_pattern_word(word: str) -> bool:
    # every char must be a token character or the wildcard
    return all(ch == WILDCARD or ch == "'" or (ch.isalnum() and ch != "_") for ch in word)


def _word_matches(pattern_word: str, token: str) -> bool:
    if len(pattern_word) != len(token):
        return False
    return all(p == WILDCARD or p == t for p, t in zip(pattern_word, token))


def _window_matches(words: tuple[str, ...], tokens: list[str] | tuple[str, ...], start: int) -> bool:
    if start + len(words) > len(tokens):
        return False
    return all(_word_matches(w, tokens[start + i]) for i, w in enumerate(words))


def classify(tokens: list[str] | tuple[str, ...], lex: Lexicon) -> frozenset[MatchResult]:
    """Match every lexicon entry against consecutive token runs.

    Returns one MatchResult per category with at least one matching entry;
    the result is independent of lexicon entry order. An empty set means
    the caller should record the event as Unclassified.
    """
    per_cat: dict[Category, dict[str, int]] = {}
    for entry in lex.entries:
        words = entry.words
        first = None
        for start in range(len(tokens) - len(words) + 1):
            if _window_matches(words, tokens, start):
                first = start
                break
        if first is None:
            continue
        hits = per_cat.setdefault(entry.category, {})
        prev = hits.get(entry.pattern)
        if prev is None or first < prev:
            hits[entry.pattern] = first
    results = set()
    for cat, hits in per_cat.items():
        results.add(
            MatchResult(
                category=cat,
                matched_entries=tuple(sorted(hits)),
                first_offset=min(hits.values()),
                score=len(hits),
            )
        )
    return frozenset(results)


def build_lexicon(pairs: list[tuple[Category, str]], version: int = 1) -> Lexicon:
    """Normalize and validate (category, pattern) pairs into a Lexicon."""
    entries = []
    seen = set()
    for cat, raw_pattern in pairs:
        pattern = normalize(raw_pattern)
        if not pattern:
            raise LexiconError(f"pattern empty after normalization: {raw_pattern!r}")
        for word in pattern.split(" "):
            if not _valid_pattern_word(word):
                raise LexiconError(f"pattern word {word!r} has characters that can never match a token")
        key = (cat, pattern)
        if key in seen:
            raise LexiconError(f"duplicate entry ({cat.slug}, {pattern!r})")
        seen.add(key)
        entries.append(LexiconEntry(category=cat, pattern=pattern))
    return Lexicon(version=version, entries=tuple(entries))


def load_lexicon(path: str | Path, version: int = 1) -> Lexicon:
    """Parse a lexicon file: one `<category-slug>: <pattern>` entry per line,
    `#` comments and blank lines ignored."""
    path = Path(path)
    pairs = []
    seen: dict[tuple[Category, str], int] = {}
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if ":" not in stripped:
                raise LexiconError("expected '<category-slug>: <pattern>'", line_no)
            slug, _, pattern_part = stripped.partition(":")
            cat = category_from_slug(slug)
            if cat is None or cat is Category.UNCLASSIFIED:
                raise LexiconError(f"unknown category {slug.strip()!r}", line_no)
            pattern = normalize(pattern_part)
            if not pattern:
                raise LexiconError("pattern empty after normalization", line_no)
            for word in pattern.split(" "):
                if not _valid_pattern_word(word):
                    raise LexiconError(f"pattern word {word!r} has invalid characters", line_no)
            key = (cat, pattern)
            if key in seen:
                raise LexiconError(
                    f"duplicate entry ({cat.slug}, {pattern!r}), first seen on line {seen[key]}",
                    line_no,
                )
            seen[key] = line_no
            pairs.append(LexiconEntry(category=cat, pattern=pattern))
    return Lexicon(version=version, entries=tuple(pairs))
