"""Time-bucketed event store with an inverted index, envelope encryption at
rest, a write-ahead log, and a retention policy.

Layout under the store directory:

    manifest.json    segments, sizes, seal status, wrapped-data-key ids
    wal.log          line-delimited JSON events of unsealed segments
    dedup.idx        hashes of (source_kind, external_id) pairs already sealed
    seg-<bucket-unix>-<id>/events.enc   sealed, compressed, encrypted segment

Single writer, many concurrent readers.  Unsealed segments live in memory
and are recovered from the WAL; sealing serializes, compresses, and
encrypts a segment under a fresh random data key wrapped by the master key
(envelope pattern), then removes the plaintext from the WAL.
"""

from __future__ import annotations

import hashlib
import json
import os
import secrets
import shutil
import uuid
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Iterator

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .model import (
    IndexedEvent,
    TimeRange,
    category_from_label,
    decode_event,
    encode_event,
    with_event_id,
)
from .timeutil import epoch_floor, to_rfc3339, parse_rfc3339, utcnow

DEFAULT_BUCKET_SPAN = timedelta(hours=1)

_ENC_MAGIC = b"OSEG0001\n"


class StoreError(Exception):
    pass


class StoreClosedError(StoreError):
    pass


class DuplicateEventError(StoreError):
    def __init__(self, source_kind: str, external_id: str):
        super().__init__(f"duplicate event ({source_kind}, {external_id})")
        self.source_kind = source_kind
        self.external_id = external_id


class SegmentIntegrityError(StoreError):
    """Authenticated decryption failed; the segment has been quarantined."""

    def __init__(self, segment_id: int):
        super().__init__(f"segment {segment_id} failed integrity check and was quarantined")
        self.segment_id = segment_id


class SecretStoreUnavailableError(StoreError):
    pass


@dataclass(frozen=True)
class RetentionPolicy:
    max_age: timedelta
    max_total_bytes: int

    def __post_init__(self):
        if self.max_age <= timedelta(0) or self.max_total_bytes <= 0:
            raise ValueError("retention limits must be positive")


@dataclass
class Segment:
    segment_id: int
    bucket_start: datetime
    bucket_span: timedelta
    events: list[IndexedEvent] = field(default_factory=list)
    postings: dict[str, list[int]] = field(default_factory=dict)
    field_postings: dict[tuple[str, str], list[int]] = field(default_factory=dict)
    sealed: bool = False

    def add(self, e: IndexedEvent) -> None:
        assert not self.sealed, "sealed segments are immutable"
        self.events.append(e)
        for token in set(e.tokens):
            self.postings.setdefault(token, []).append(e.event_id)
        for name, value in e.fields.items():
            self.field_postings.setdefault((name, value), []).append(e.event_id)
        # virtual multi-valued field exposing classifier results to search
        for name in e.category_names():
            self.field_postings.setdefault(("category", name), []).append(e.event_id)


@dataclass
class _SegmentMeta:
    segment_id: int
    dirname: str
    bucket_start: datetime
    bucket_span: timedelta
    sealed: bool = False
    size_bytes: int = 0
    event_count: int = 0
    data_key_id: str | None = None
    quarantined: bool = False

    def to_json(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "dir": self.dirname,
            "bucket_start": to_rfc3339(self.bucket_start),
            "bucket_span_s": int(self.bucket_span.total_seconds()),
            "sealed": self.sealed,
            "size_bytes": self.size_bytes,
            "event_count": self.event_count,
            "data_key_id": self.data_key_id,
            "quarantined": self.quarantined,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "_SegmentMeta":
        return cls(
            segment_id=obj["segment_id"],
            dirname=obj["dir"],
            bucket_start=parse_rfc3339(obj["bucket_start"]),
            bucket_span=timedelta(seconds=obj["bucket_span_s"]),
            sealed=obj["sealed"],
            size_bytes=obj["size_bytes"],
            event_count=obj["event_count"],
            data_key_id=obj.get("data_key_id"),
            quarantined=obj.get("quarantined", False),
        )


def _dedup_key(source_kind: str, external_id: str) -> str:
    return hashlib.sha256(f"{source_kind}\x00{external_id}".encode()).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class EventStore:
    """Persistent store of IndexedEvents, bucketed by event_time.

    ``master_key_provider`` returns the 32-byte master key used to wrap
    per-segment data keys; it is consulted only at seal/read time so the
    secret store can stay closed during pure in-memory operation.
    ``audit_hook(action, resource, outcome)`` is called for deletions and
    quarantines when provided.
    """

    def __init__(
        self,
        root: str | Path,
        master_key_provider: Callable[[], bytes],
        bucket_span: timedelta = DEFAULT_BUCKET_SPAN,
        audit_hook: Callable[[str, str, str], None] | None = None,
        read_only: bool = False,
    ):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._key_provider = master_key_provider
        self.bucket_span = bucket_span
        self._audit = audit_hook or (lambda action, resource, outcome: None)
        self._read_only = read_only
        self._closed = False
        self._active: dict[int, Segment] = {}
        self._meta: dict[int, _SegmentMeta] = {}
        self._dedup: set[str] = set()
        self._next_event_id = 1
        self._next_segment_id = 1
        self._wal = None
        #: optional single-writer post-append hook (e.g. alert evaluation)
        self.post_append: Callable[[IndexedEvent], None] | None = None
        self._load()
        if not read_only:
            self._wal = (self.root / "wal.log").open("a", encoding="utf-8")

    # -- paths -------------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def wal_path(self) -> Path:
        return self.root / "wal.log"

    @property
    def dedup_path(self) -> Path:
        return self.root / "dedup.idx"

    def _segment_dir(self, meta: _SegmentMeta) -> Path:
        return self.root / meta.dirname

    # -- startup / recovery --------------------------------------------------

    def _load(self) -> None:
        if self.manifest_path.exists():
            manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
            self.bucket_span = timedelta(seconds=manifest.get("bucket_span_s", 3600))
            self._next_event_id = manifest.get("next_event_id", 1)
            self._next_segment_id = manifest.get("next_segment_id", 1)
            for obj in manifest.get("segments", []):
                meta = _SegmentMeta.from_json(obj)
                self._meta[meta.segment_id] = meta
        if self.dedup_path.exists():
            with self.dedup_path.open(encoding="utf-8") as fh:
                self._dedup.update(line.strip() for line in fh if line.strip())
        # replay WAL: rebuild unsealed segments and their dedup keys
        if self.wal_path.exists():
            with self.wal_path.open(encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    e = decode_event(line)
                    self._place(e)
                    self._dedup.add(_dedup_key(e.raw.source_kind, e.raw.external_id))
                    self._next_event_id = max(self._next_event_id, e.event_id + 1)

    def _place(self, e: IndexedEvent) -> Segment:
        """Route an event into its unsealed segment, creating one if needed."""
        bucket = epoch_floor(e.event_time, self.bucket_span)
        for seg in self._active.values():
            if seg.bucket_start == bucket:
                seg.add(e)
                return seg
        meta = None
        # reuse the manifest entry if this unsealed segment is already listed
        for m in self._meta.values():
            if not m.sealed and m.bucket_start == bucket:
                meta = m
                break
        if meta is None:
            seg_id = self._next_segment_id
            self._next_segment_id += 1
            meta = _SegmentMeta(
                segment_id=seg_id,
                dirname=f"seg-{int(bucket.timestamp())}-{seg_id}",
                bucket_start=bucket,
                bucket_span=self.bucket_span,
            )
            self._meta[seg_id] = meta
        seg = Segment(meta.segment_id, bucket, self.bucket_span)
        seg.add(e)
        self._active[seg.segment_id] = seg
        return seg

    def _write_manifest(self) -> None:
        for seg_id, seg in self._active.items():
            self._meta[seg_id].event_count = len(seg.events)
        manifest = {
            "bucket_span_s": int(self.bucket_span.total_seconds()),
            "next_event_id": self._next_event_id,
            "next_segment_id": self._next_segment_id,
            "segments": [m.to_json() for m in sorted(self._meta.values(), key=lambda m: m.segment_id)],
        }
        _atomic_write(self.manifest_path, json.dumps(manifest, indent=1).encode())

    # -- write path ----------------------------------------------------------

    def _check_writable(self) -> None:
        if self._closed:
            raise StoreClosedError("store is closed")
        if self._read_only:
            raise StoreError("store opened read-only")

    def append(self, e: IndexedEvent) -> int:
        """Append an indexed event, assigning its event_id.

        The event_id on the input is a placeholder and is replaced by the
        next id in sequence. The write-ahead record is flushed before the
        id is returned.
        """
        self._check_writable()
        key = _dedup_key(e.raw.source_kind, e.raw.external_id)
        if key in self._dedup:
            raise DuplicateEventError(e.raw.source_kind, e.raw.external_id)
        event_id = self._next_event_id
        stored = with_event_id(e, event_id)
        line = encode_event(stored)
        try:
            self._wal.write(line + "\n")
            self._wal.flush()
            os.fsync(self._wal.fileno())
        except OSError as exc:
            raise StoreError(f"write-ahead log write failed: {exc}") from exc
        self._next_event_id += 1
        self._dedup.add(key)
        self._place(stored)
        if self.post_append is not None:
            self.post_append(stored)
        return event_id

    # -- read path -----------------------------------------------------------

    def _segment_overlaps(self, meta: _SegmentMeta, rng: TimeRange) -> bool:
        bucket_end = meta.bucket_start + meta.bucket_span
        if rng.earliest is not None and bucket_end <= rng.earliest:
            return False
        if rng.latest is not None and meta.bucket_start > rng.latest:
            return False
        return True

    def _load_sealed(self, meta: _SegmentMeta) -> Segment:
        path = self._segment_dir(meta) / "events.enc"
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise StoreError(f"segment {meta.segment_id}: {exc}") from exc
        try:
            if not blob.startswith(_ENC_MAGIC):
                raise InvalidTag()
            rest = blob[len(_ENC_MAGIC):]
            header_line, _, ct = rest.partition(b"\n")
            header = json.loads(header_line)
            master = self._master_key()
            wrapped = bytes.fromhex(header["wrapped_key"])
            data_key = AESGCM(master).decrypt(
                bytes.fromhex(header["wrap_nonce"]), wrapped, header["key_id"].encode()
            )
            plain = AESGCM(data_key).decrypt(
                bytes.fromhex(header["data_nonce"]), ct, f"segment:{meta.segment_id}".encode()
            )
            payload = json.loads(zlib.decompress(plain))
        except (InvalidTag, ValueError, KeyError, zlib.error, json.JSONDecodeError):
            self._quarantine(meta)
            raise SegmentIntegrityError(meta.segment_id) from None
        seg = Segment(meta.segment_id, meta.bucket_start, meta.bucket_span, sealed=True)
        seg.events = [decode_event(line) for line in payload["events"]]
        seg.postings = {t: list(ids) for t, ids in payload["postings"].items()}
        seg.field_postings = {
            (f, v): list(ids) for f, v, ids in payload["field_postings"]
        }
        return seg

    def _quarantine(self, meta: _SegmentMeta) -> None:
        meta.quarantined = True
        if not self._read_only and not self._closed:
            self._write_manifest()
        self._audit("segment-quarantine", meta.dirname, "error")

    def _iter_segments(self, rng: TimeRange) -> Iterator[Segment]:
        if self._closed:
            raise StoreClosedError("store is closed")
        metas = sorted(self._meta.values(), key=lambda m: m.segment_id)
        for meta in metas:
            if meta.quarantined or not self._segment_overlaps(meta, rng):
                continue
            if meta.sealed:
                yield self._load_sealed(meta)
            elif meta.segment_id in self._active:
                yield self._active[meta.segment_id]

    def scan(
        self,
        rng: TimeRange = TimeRange(),
        filters: list[tuple[str, str]] | None = None,
        use_postings: bool = True,
    ) -> list[IndexedEvent]:
        """Events with event_time in range matching all field filters exactly,
        in ascending event_id order.

        `Class` filter values are canonicalized before comparison, matching
        the canonicalization applied at index time.  The reserved filter name
        `category` matches the classifier's results rather than a stored
        field.  Results are identical with and without postings acceleration.
        """
        filters = list(filters or [])
        canon = []
        for name, value in filters:
            if name in ("Class", "category"):
                value = category_from_label(value).value
            canon.append((name, value))
        out: list[IndexedEvent] = []
        for seg in self._iter_segments(rng):
            events = seg.events
            if canon and use_postings:
                ids: set[int] | None = None
                for key in canon:
                    posting = set(seg.field_postings.get(key, ()))
                    ids = posting if ids is None else ids & posting
                    if not ids:
                        break
                if not ids:
                    continue
                events = [e for e in events if e.event_id in ids]
            else:
                for name, value in canon:
                    if name == "category":
                        events = [e for e in events if value in e.category_names()]
                    else:
                        events = [e for e in events if e.fields.get(name) == value]
            out.extend(e for e in events if rng.contains(e.event_time))
        out.sort(key=lambda e: e.event_id)
        return out

    def event_count(self) -> int:
        return sum(m.event_count for m in self._meta.values() if m.sealed and not m.quarantined) + sum(
            len(s.events) for s in self._active.values()
        )

    def segment_ids(self, sealed: bool | None = None) -> list[int]:
        out = []
        for m in sorted(self._meta.values(), key=lambda m: m.segment_id):
            if sealed is None or m.sealed == sealed:
                out.append(m.segment_id)
        return out

    # -- sealing -------------------------------------------------------------

    def _master_key(self) -> bytes:
        try:
            key = self._key_provider()
        except Exception as exc:
            raise SecretStoreUnavailableError(f"master key unavailable: {exc}") from exc
        if not isinstance(key, bytes) or len(key) != 32:
            raise SecretStoreUnavailableError("master key must be 32 bytes")
        return key

    def seal_and_encrypt(self, segment_id: int) -> Path:
        """Serialize, compress, and encrypt a segment under a fresh data key
        wrapped by the master key; remove its plaintext from the WAL."""
        self._check_writable()
        meta = self._meta.get(segment_id)
        if meta is None:
            raise StoreError(f"no such segment {segment_id}")
        if meta.sealed:
            raise StoreError(f"segment {segment_id} already sealed")
        seg = self._active.get(segment_id)
        if seg is None:
            raise StoreError(f"segment {segment_id} has no events in memory")
        master = self._master_key()

        payload = {
            "segment_id": seg.segment_id,
            "bucket_start": to_rfc3339(seg.bucket_start),
            "events": [encode_event(e) for e in seg.events],
            "postings": seg.postings,
            "field_postings": [[f, v, ids] for (f, v), ids in seg.field_postings.items()],
        }
        plain = zlib.compress(json.dumps(payload, separators=(",", ":")).encode(), 6)
        data_key = secrets.token_bytes(32)
        data_nonce = secrets.token_bytes(12)
        key_id = str(uuid.uuid4())
        wrap_nonce = secrets.token_bytes(12)
        wrapped = AESGCM(master).encrypt(wrap_nonce, data_key, key_id.encode())
        ct = AESGCM(data_key).encrypt(data_nonce, plain, f"segment:{segment_id}".encode())
        header = json.dumps(
            {
                "key_id": key_id,
                "wrap_nonce": wrap_nonce.hex(),
                "wrapped_key": wrapped.hex(),
                "data_nonce": data_nonce.hex(),
            }
        ).encode()

        seg_dir = self._segment_dir(meta)
        seg_dir.mkdir(parents=True, exist_ok=True)
        enc_path = seg_dir / "events.enc"
        _atomic_write(enc_path, _ENC_MAGIC + header + b"\n" + ct)

        # dedup keys of sealed events become durable outside the WAL
        with self.dedup_path.open("a", encoding="utf-8") as fh:
            for e in seg.events:
                fh.write(_dedup_key(e.raw.source_kind, e.raw.external_id) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

        meta.sealed = True
        meta.size_bytes = enc_path.stat().st_size
        meta.event_count = len(seg.events)
        meta.data_key_id = key_id
        seg.sealed = True
        del self._active[segment_id]
        self._compact_wal()
        self._write_manifest()
        return enc_path

    def seal_all(self) -> list[int]:
        sealed = []
        for seg_id in list(self._active):
            self.seal_and_encrypt(seg_id)
            sealed.append(seg_id)
        return sealed

    def seal_idle(self, now: datetime | None = None) -> list[int]:
        """Seal unsealed segments whose bucket period has already ended."""
        now = now or utcnow()
        sealed = []
        for seg_id in list(self._active):
            meta = self._meta[seg_id]
            if meta.bucket_start + meta.bucket_span <= now:
                self.seal_and_encrypt(seg_id)
                sealed.append(seg_id)
        return sealed

    def _compact_wal(self) -> None:
        """Rewrite the WAL keeping only events of still-unsealed segments."""
        lines = []
        for seg in self._active.values():
            lines.extend(encode_event(e) + "\n" for e in seg.events)
        self._wal.close()
        _atomic_write(self.wal_path, "".join(lines).encode())
        self._wal = self.wal_path.open("a", encoding="utf-8")

    # -- retention -----------------------------------------------------------

    def enforce_retention(self, policy: RetentionPolicy, now: datetime | None = None) -> list[int]:
        """Delete whole sealed segments that are too old, then the oldest
        sealed segments until the size budget is met. Never touches unsealed
        segments. Deletions are audited."""
        self._check_writable()
        now = now or utcnow()
        deleted: list[int] = []
        sealed = [m for m in self._meta.values() if m.sealed]
        sealed.sort(key=lambda m: (m.bucket_start, m.segment_id))
        cutoff = now - policy.max_age
        survivors = []
        for meta in sealed:
            if meta.bucket_start + meta.bucket_span < cutoff:
                self._delete_segment(meta)
                deleted.append(meta.segment_id)
            else:
                survivors.append(meta)
        total = sum(m.size_bytes for m in survivors)
        while survivors and total > policy.max_total_bytes:
            meta = survivors.pop(0)
            self._delete_segment(meta)
            deleted.append(meta.segment_id)
            total -= meta.size_bytes
        if deleted:
            self._write_manifest()
        return deleted

    def _delete_segment(self, meta: _SegmentMeta) -> None:
        seg_dir = self._segment_dir(meta)
        if seg_dir.exists():
            shutil.rmtree(seg_dir)
        del self._meta[meta.segment_id]
        self._audit("segment-delete", meta.dirname, "allow")

    # -- lifecycle -----------------------------------------------------------

    def close(self) -> None:
        if self._closed:
            return
        if self._wal is not None:
            self._wal.close()
            self._wal = None
        if not self._read_only:
            self._write_manifest()
        self._closed = True

    def __enter__(self) -> "EventStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
