"""Parser, evaluator, and canonical renderer for the mini search language.

Grammar:

    query   := term+ ( '|' command )*
    term    := field '=' value | bareword
             | 'earliest=' reltime | 'latest=' reltime
    command := 'rare' ['limit' '=' INT] [field]
             | 'top'  ['limit' '=' INT] [field]
             | 'stats' 'count' ['by' field]
             | 'head' INT
             | 'timechart' 'count' ['by' field] ['span' '=' duration]

Values may be double-quoted; quotes are required when a value contains
spaces.  reltime is '-<n><unit>' with unit in {m,h,d}, or an RFC 3339
timestamp.  Whitespace around '|' is optional.

Field filters match stored field values exactly (Class is canonicalized on
both sides); barewords must appear as whole normalized tokens of the event
text.  Pipelines run left-to-right: the first command consumes the matched
events, and only `head` may follow a table-producing command (it truncates
rows).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from decimal import ROUND_HALF_EVEN, Decimal
from enum import Enum
from typing import Union

from .lexicon import normalize, tokenize
from .model import IndexedEvent, TimeRange
from .timeutil import (
    epoch_floor,
    format_duration,
    parse_duration,
    parse_rfc3339,
    to_rfc3339,
    utcnow,
)

DEFAULT_LIMIT = 10
DEFAULT_FIELD = "Tweet"
DEFAULT_SPAN = timedelta(hours=1)

_RELTIME_UNITS = {"m": 60, "h": 3600, "d": 86400}


class QuerySyntaxError(Exception):
    def __init__(self, message: str, offset: int, expected: tuple[str, ...] = ()):
        self.offset = offset
        self.expected = expected
        detail = f"syntax error at offset {offset}: {message}"
        if expected:
            detail += f" (expected {', '.join(expected)})"
        super().__init__(detail)


class EvaluationError(Exception):
    def __init__(self, message: str, field_name: str | None = None):
        self.field_name = field_name
        super().__init__(message)


# --- AST -----------------------------------------------------------------


@dataclass(frozen=True)
class FieldFilter:
    field: str
    value: str
    quoted: bool = False  # preserved from input so render stays faithful


@dataclass(frozen=True)
class Bareword:
    word: str


@dataclass(frozen=True)
class RelTime:
    """Relative time '-<n><unit>', resolved against `now` at evaluation."""

    n: int
    unit: str

    def resolve(self, now: datetime) -> datetime:
        return now - timedelta(seconds=self.n * _RELTIME_UNITS[self.unit])

    def render(self) -> str:
        return f"-{self.n}{self.unit}"


TimeBound = Union[None, datetime, RelTime]


@dataclass(frozen=True)
class QueryTime:
    earliest: TimeBound = None
    latest: TimeBound = None

    def resolve(self, now: datetime) -> TimeRange:
        def bound(b: TimeBound) -> datetime | None:
            if b is None:
                return None
            if isinstance(b, RelTime):
                return b.resolve(now)
            return b

        return TimeRange(bound(self.earliest), bound(self.latest))


class CommandKind(Enum):
    RARE = "rare"
    TOP = "top"
    STATS_COUNT = "stats"
    HEAD = "head"
    TIMECHART = "timechart"


@dataclass(frozen=True)
class Command:
    kind: CommandKind
    limit: int = DEFAULT_LIMIT
    field: str = DEFAULT_FIELD
    by_field: str | None = None
    span: timedelta = DEFAULT_SPAN

    def __post_init__(self):
        if self.limit < 1:
            raise ValueError("limit must be >= 1")
        if self.span <= timedelta(0):
            raise ValueError("span must be positive")


@dataclass(frozen=True)
class QueryAst:
    filters: tuple[Union[FieldFilter, Bareword], ...]
    time: QueryTime = QueryTime()
    pipeline: tuple[Command, ...] = ()

    def with_time(self, time: QueryTime) -> "QueryAst":
        return QueryAst(self.filters, time, self.pipeline)


@dataclass(frozen=True)
class ResultTable:
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]

    def __post_init__(self):
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError("row width does not match columns")

    def to_json_bytes(self) -> bytes:
        obj = {"columns": list(self.columns), "rows": [list(r) for r in self.rows]}
        return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode()

    def to_text(self) -> str:
        def cell(v) -> str:
            if isinstance(v, float):
                return f"{v:.2f}"
            return str(v)

        grid = [list(self.columns)] + [[cell(v) for v in row] for row in self.rows]
        widths = [max(len(row[i]) for row in grid) for i in range(len(self.columns))]
        lines = ["  ".join(val.ljust(w) for val, w in zip(row, widths)).rstrip() for row in grid]
        return "\n".join(lines)


# --- lexer ---------------------------------------------------------------


@dataclass(frozen=True)
class _Tok:
    kind: str  # WORD | QUOTED | EQ | PIPE | EOF
    text: str
    offset: int


_SPECIAL = {"|", "=", '"'}


def _lex(query: str) -> list[_Tok]:
    toks = []
    i, n = 0, len(query)
    while i < n:
        ch = query[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "|":
            toks.append(_Tok("PIPE", "|", i))
            i += 1
        elif ch == "=":
            toks.append(_Tok("EQ", "=", i))
            i += 1
        elif ch == '"':
            j = query.find('"', i + 1)
            if j < 0:
                raise QuerySyntaxError("unterminated quoted value", i, ('closing "',))
            toks.append(_Tok("QUOTED", query[i + 1 : j], i))
            i = j + 1
        else:
            j = i
            while j < n and not query[j].isspace() and query[j] not in _SPECIAL:
                j += 1
            toks.append(_Tok("WORD", query[i:j], i))
            i = j
    toks.append(_Tok("EOF", "", n))
    return toks


# --- parser --------------------------------------------------------------

_COMMAND_WORDS = ("rare", "top", "stats", "head", "timechart")


class _Parser:
    def __init__(self, query: str):
        self.query = query
        self.toks = _lex(query)
        self.pos = 0

    def peek(self, ahead: int = 0) -> _Tok:
        return self.toks[min(self.pos + ahead, len(self.toks) - 1)]

    def next(self) -> _Tok:
        tok = self.toks[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def fail(self, message: str, tok: _Tok, expected: tuple[str, ...] = ()):
        raise QuerySyntaxError(message, tok.offset, expected)

    def expect_word(self, what: str) -> _Tok:
        tok = self.next()
        if tok.kind != "WORD":
            self.fail(f"expected {what}", tok, (what,))
        return tok

    def parse(self) -> QueryAst:
        if self.peek().kind == "EOF":
            raise QuerySyntaxError("empty query", 0, ("search term",))
        filters: list[FieldFilter | Bareword] = []
        earliest: TimeBound = None
        latest: TimeBound = None
        while self.peek().kind not in ("PIPE", "EOF"):
            tok = self.next()
            if tok.kind == "QUOTED":
                self.fail("expected field name or bareword before quoted value", tok,
                          ("field=value", "bareword"))
            if self.peek().kind == "EQ":
                self.next()
                value_tok = self.next()
                if value_tok.kind not in ("WORD", "QUOTED"):
                    self.fail("expected a value after '='", value_tok, ("value",))
                if tok.text in ("earliest", "latest"):
                    bound = self._parse_reltime(value_tok)
                    if tok.text == "earliest":
                        if earliest is not None:
                            self.fail("duplicate earliest modifier", tok, ())
                        earliest = bound
                    else:
                        if latest is not None:
                            self.fail("duplicate latest modifier", tok, ())
                        latest = bound
                else:
                    filters.append(FieldFilter(tok.text, value_tok.text,
                                               quoted=value_tok.kind == "QUOTED"))
            else:
                filters.append(Bareword(tok.text))
        pipeline = []
        while self.peek().kind == "PIPE":
            self.next()
            pipeline.append(self._parse_command())
        tok = self.peek()
        if tok.kind != "EOF":
            self.fail("unexpected trailing input", tok, ("|", "end of query"))
        if not filters and earliest is None and latest is None:
            raise QuerySyntaxError("query needs at least one search term", 0, ("search term",))
        return QueryAst(tuple(filters), QueryTime(earliest, latest), tuple(pipeline))

    def _parse_reltime(self, tok: _Tok) -> TimeBound:
        text = tok.text
        if text.startswith("-"):
            body = text[1:]
            if len(body) >= 2 and body[:-1].isdigit() and body[-1] in _RELTIME_UNITS:
                return RelTime(int(body[:-1]), body[-1])
            self.fail(f"bad relative time {text!r}", tok, ("-<n>m", "-<n>h", "-<n>d"))
        try:
            return parse_rfc3339(text)
        except ValueError:
            self.fail(f"bad time {text!r}", tok, ("-<n><unit>", "RFC 3339 timestamp"))

    def _parse_int(self, what: str) -> int:
        tok = self.next()
        if tok.kind != "WORD" or not tok.text.isdigit():
            self.fail(f"expected {what}", tok, ("integer",))
        value = int(tok.text)
        if value < 1:
            self.fail(f"{what} must be >= 1", tok, ("positive integer",))
        return value

    def _parse_command(self) -> Command:
        tok = self.expect_word("command")
        name = tok.text.lower()
        if name in ("rare", "top"):
            limit = DEFAULT_LIMIT
            if self.peek().kind == "WORD" and self.peek().text == "limit" and self.peek(1).kind == "EQ":
                self.next()
                self.next()
                limit = self._parse_int("limit")
            fld = DEFAULT_FIELD
            if self.peek().kind == "WORD":
                fld = self.next().text
            kind = CommandKind.RARE if name == "rare" else CommandKind.TOP
            return Command(kind=kind, limit=limit, field=fld)
        if name == "stats":
            word = self.expect_word("'count'")
            if word.text != "count":
                self.fail("only 'stats count' is supported", word, ("count",))
            by_field = None
            if self.peek().kind == "WORD" and self.peek().text == "by":
                self.next()
                by_field = self.expect_word("field name").text
            return Command(kind=CommandKind.STATS_COUNT, by_field=by_field)
        if name == "head":
            n = self._parse_int("head count")
            return Command(kind=CommandKind.HEAD, limit=n)
        if name == "timechart":
            word = self.expect_word("'count'")
            if word.text != "count":
                self.fail("only 'timechart count' is supported", word, ("count",))
            by_field = None
            span = DEFAULT_SPAN
            if self.peek().kind == "WORD" and self.peek().text == "by":
                self.next()
                by_field = self.expect_word("field name").text
            if self.peek().kind == "WORD" and self.peek().text == "span" and self.peek(1).kind == "EQ":
                self.next()
                self.next()
                span_tok = self.next()
                if span_tok.kind not in ("WORD", "QUOTED"):
                    self.fail("expected a duration", span_tok, ("duration",))
                try:
                    span = parse_duration(span_tok.text)
                except ValueError:
                    self.fail(f"bad duration {span_tok.text!r}", span_tok, ("<n>s/m/h/d",))
            return Command(kind=CommandKind.TIMECHART, by_field=by_field, span=span)
        self.fail(f"unknown command {tok.text!r}", tok, _COMMAND_WORDS)


def parse(query: str) -> QueryAst:
    return _Parser(query).parse()


def parse_time_bound(text: str) -> TimeBound:
    """Parse a standalone time bound: '-<n><unit>' or an RFC 3339 timestamp."""
    text = text.strip()
    if text.startswith("-"):
        body = text[1:]
        if len(body) >= 2 and body[:-1].isdigit() and body[-1] in _RELTIME_UNITS:
            return RelTime(int(body[:-1]), body[-1])
        raise ValueError(f"bad relative time {text!r}")
    return parse_rfc3339(text)


# --- renderer ------------------------------------------------------------


def _render_value(value: str, quoted: bool = False) -> str:
    if quoted or value == "" or any(ch.isspace() or ch in _SPECIAL for ch in value):
        return f'"{value}"'
    return value


def _render_bound(b: TimeBound) -> str:
    if isinstance(b, RelTime):
        return b.render()
    return to_rfc3339(b)


def _render_command(cmd: Command) -> str:
    if cmd.kind in (CommandKind.RARE, CommandKind.TOP):
        return f"{cmd.kind.value} limit={cmd.limit} {cmd.field}"
    if cmd.kind is CommandKind.STATS_COUNT:
        return "stats count" + (f" by {cmd.by_field}" if cmd.by_field else "")
    if cmd.kind is CommandKind.HEAD:
        return f"head {cmd.limit}"
    base = "timechart count"
    if cmd.by_field:
        base += f" by {cmd.by_field}"
    return base + f" span={format_duration(cmd.span)}"


def render(ast: QueryAst) -> str:
    """Canonical query text: defaults explicit, single spaces, quotes only
    where needed. parse(render(ast)) == ast."""
    parts = []
    for f in ast.filters:
        if isinstance(f, FieldFilter):
            parts.append(f"{f.field}={_render_value(f.value, f.quoted)}")
        else:
            parts.append(f.word)
    if ast.time.earliest is not None:
        parts.append(f"earliest={_render_bound(ast.time.earliest)}")
    if ast.time.latest is not None:
        parts.append(f"latest={_render_bound(ast.time.latest)}")
    text = " ".join(parts)
    for cmd in ast.pipeline:
        text += f" | {_render_command(cmd)}"
    return text


# --- evaluator -----------------------------------------------------------


def _percent(count: int, total: int) -> float:
    if total == 0:
        return 0.0
    pct = Decimal(100 * count) / Decimal(total)
    return float(pct.quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def _tokens_contain(tokens: tuple[str, ...], needle: list[str]) -> bool:
    if not needle:
        return False
    for start in range(len(tokens) - len(needle) + 1):
        if all(tokens[start + i] == w for i, w in enumerate(needle)):
            return True
    return False


def _field_values(events: list[IndexedEvent], field_name: str) -> list[str]:
    values = [e.fields[field_name] for e in events if field_name in e.fields]
    if events and not values:
        raise EvaluationError(f"unknown field {field_name!r}", field_name)
    return values


def _event_row(e: IndexedEvent) -> tuple:
    return (to_rfc3339(e.event_time), e.fields.get("Class", ""), e.fields.get("Tweet", e.raw.text))


def _group_table(events: list[IndexedEvent], cmd: Command, ascending: bool) -> ResultTable:
    values = _field_values(events, cmd.field)
    total = len(events)
    counts: dict[str, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    items = sorted(counts.items(), key=lambda kv: (kv[1] if ascending else -kv[1], kv[0]))
    rows = tuple(
        (value, count, _percent(count, total)) for value, count in items[: cmd.limit]
    )
    return ResultTable(("value", "count", "percent"), rows)


def _stats_table(events: list[IndexedEvent], cmd: Command) -> ResultTable:
    if cmd.by_field is None:
        return ResultTable(("count",), ((len(events),),))
    values = _field_values(events, cmd.by_field)
    counts: dict[str, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    items = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ResultTable((cmd.by_field, "count"), tuple((v, c) for v, c in items))


def _timechart_table(events: list[IndexedEvent], cmd: Command) -> ResultTable:
    if not events:
        cols = ("bucket_start", "count") if cmd.by_field is None else ("bucket_start",)
        return ResultTable(cols, ())
    span = cmd.span
    buckets = [epoch_floor(e.event_time, span) for e in events]
    lo, hi = min(buckets), max(buckets)
    ordered = []
    b = lo
    while b <= hi:
        ordered.append(b)
        b = b + span
    if cmd.by_field is None:
        counts = {b: 0 for b in ordered}
        for b in buckets:
            counts[b] += 1
        rows = tuple((to_rfc3339(b), counts[b]) for b in ordered)
        return ResultTable(("bucket_start", "count"), rows)
    values = _field_values(events, cmd.by_field)
    distinct = sorted(set(values))
    grid = {b: {v: 0 for v in distinct} for b in ordered}
    for e in events:
        v = e.fields.get(cmd.by_field)
        if v is not None:
            grid[epoch_floor(e.event_time, span)][v] += 1
    rows = tuple(
        (to_rfc3339(b), *(grid[b][v] for v in distinct)) for b in ordered
    )
    return ResultTable(("bucket_start", *distinct), rows)


def evaluate(ast: QueryAst, store, now: datetime | None = None) -> ResultTable:
    """Run a parsed query against a store.

    The search stage scans by time range and field filters, then requires
    every bareword to appear as a run of normalized tokens.  Without a
    pipeline the matched events themselves are returned as a table.
    """
    now = now or utcnow()
    try:
        rng = ast.time.resolve(now)
    except ValueError as exc:
        raise EvaluationError(str(exc)) from exc
    field_filters = [(f.field, f.value) for f in ast.filters if isinstance(f, FieldFilter)]
    events = store.scan(rng, field_filters)
    for bare in (f for f in ast.filters if isinstance(f, Bareword)):
        needle = tokenize(normalize(bare.word))
        events = [e for e in events if _tokens_contain(e.tokens, needle)]

    if not ast.pipeline:
        return ResultTable(("event_time", "Class", "Tweet"), tuple(_event_row(e) for e in events))

    table: ResultTable | None = None
    for cmd in ast.pipeline:
        if table is None:
            if cmd.kind is CommandKind.RARE:
                table = _group_table(events, cmd, ascending=True)
            elif cmd.kind is CommandKind.TOP:
                table = _group_table(events, cmd, ascending=False)
            elif cmd.kind is CommandKind.STATS_COUNT:
                table = _stats_table(events, cmd)
            elif cmd.kind is CommandKind.HEAD:
                table = ResultTable(
                    ("event_time", "Class", "Tweet"),
                    tuple(_event_row(e) for e in events[: cmd.limit]),
                )
            elif cmd.kind is CommandKind.TIMECHART:
                table = _timechart_table(events, cmd)
        elif cmd.kind is CommandKind.HEAD:
            table = ResultTable(table.columns, table.rows[: cmd.limit])
        else:
            raise EvaluationError(
                f"command '{cmd.kind.value}' cannot follow another aggregation"
            )
    return table
