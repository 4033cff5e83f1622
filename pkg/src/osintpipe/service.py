"""TLS-only HTTP service binding the pipeline together.

Every request outside /healthz and the static /ui/ assets is
authenticated against the key registry, authorized against the RBAC
matrix, and produces exactly one audit record; audit-log failure fails
closed.  The request-handling core (`Api.handle`) is plain data in/out so
it is testable without sockets; the socket layer pins TLS 1.3.
"""

from __future__ import annotations

import json
import mimetypes
import re
import threading
from dataclasses import dataclass, field
from datetime import timedelta
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlsplit

from . import query as q
from .alerts import AlertEngine, AlertRule
from .ingest import PollerConfig, RawEvent, index_event
from .lexicon import Lexicon
from .model import NAMED_CATEGORIES, TimeRange, encode_event
from .security import (
    ANONYMOUS_ID,
    AuditLog,
    AuditUnavailableError,
    AuthenticationError,
    KeyRegistry,
    Permission,
    Role,
    role_allows,
)
from .store import EventStore, RetentionPolicy, StoreError
from .timeutil import parse_duration, parse_rfc3339, utcnow

MAX_BODY_BYTES = 5 * 1024 * 1024
MAX_INGEST_EVENTS = 1000
SUMMARY_WINDOWS = ("1h", "24h", "7d", "all")


@dataclass
class ApiRequest:
    method: str
    path: str
    params: dict[str, str] = field(default_factory=dict)
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""


@dataclass
class ApiResponse:
    status: int
    body: bytes
    content_type: str = "application/json"


def _json_response(status: int, obj) -> ApiResponse:
    return ApiResponse(status, json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode())


def _error(status: int, error: str, detail: str, **extra) -> ApiResponse:
    return _json_response(status, {"error": error, "detail": detail, **extra})


class _RequestError(Exception):
    """Raised by handlers to produce a structured non-500 response."""

    def __init__(self, resp: ApiResponse):
        self.resp = resp
        super().__init__(resp.status)


@dataclass(frozen=True)
class _Route:
    action: str
    permission: Permission
    handler_name: str


_ACK_RE = re.compile(r"^/api/v1/alerts/(\d+)/ack$")

_ROUTES: dict[tuple[str, str], _Route] = {
    ("POST", "/api/v1/search"): _Route("search", Permission.SEARCH, "h_search"),
    ("GET", "/api/v1/dashboard/summary"): _Route("dashboard-summary", Permission.SEARCH, "h_summary"),
    ("POST", "/api/v1/ingest"): _Route("ingest", Permission.INGEST, "h_ingest"),
    ("GET", "/api/v1/alerts"): _Route("alerts-read", Permission.SEARCH, "h_alerts_list"),
    ("GET", "/api/v1/alerts/rules"): _Route("alert-rules-read", Permission.SEARCH, "h_rules_list"),
    ("POST", "/api/v1/alerts/rules"): _Route("alert-rule-write", Permission.MANAGE_ALERTS, "h_rules_put"),
    ("GET", "/api/v1/keys"): _Route("keys-read", Permission.MANAGE_USERS, "h_keys_list"),
    ("POST", "/api/v1/keys"): _Route("keys-create", Permission.MANAGE_USERS, "h_keys_create"),
    ("GET", "/api/v1/audit"): _Route("audit-read", Permission.READ_AUDIT, "h_audit"),
}

#: one representative guarded endpoint per permission (role sweep surface)
PERMISSION_ENDPOINTS = {
    Permission.SEARCH: ("POST", "/api/v1/search"),
    Permission.INGEST: ("POST", "/api/v1/ingest"),
    Permission.MANAGE_ALERTS: ("POST", "/api/v1/alerts/rules"),
    Permission.MANAGE_USERS: ("GET", "/api/v1/keys"),
    Permission.READ_AUDIT: ("GET", "/api/v1/audit"),
}


class Api:
    """Request-handling core; one instance owns the store writer."""

    def __init__(
        self,
        store: EventStore,
        lex: Lexicon,
        registry: KeyRegistry,
        audit: AuditLog,
        alerts: AlertEngine,
        ui_dir: Path | None = None,
    ):
        self.store = store
        self.lex = lex
        self.registry = registry
        self.audit = audit
        self.alerts = alerts
        self.ui_dir = ui_dir
        self._write_lock = threading.Lock()
        store.post_append = self.alerts.observe

    # -- entry point ---------------------------------------------------------

    def handle(self, req: ApiRequest) -> ApiResponse:
        if req.method == "GET" and req.path == "/healthz":
            return self._healthz()
        if req.method == "GET" and (req.path == "/ui" or req.path.startswith("/ui/")):
            return self._static(req.path)

        route = _ROUTES.get((req.method, req.path))
        ack_match = _ACK_RE.match(req.path)
        if route is None and req.method == "POST" and ack_match:
            route = _Route("alert-ack", Permission.MANAGE_ALERTS, "h_alert_ack")
        action = route.action if route else "request"

        principal = None
        auth_header = req.headers.get("authorization", "")
        if auth_header.lower().startswith("bearer "):
            try:
                principal = self.registry.authenticate(auth_header[7:].strip())
            except AuthenticationError:
                principal = None
        principal_id = principal.principal_id if principal else ANONYMOUS_ID

        try:
            if principal is None:
                self.audit.append(principal_id, action, req.path, "deny")
                return _error(401, "unauthorized", "valid API key required")
            if route is None:
                self.audit.append(principal_id, action, req.path, "deny")
                return _error(404, "not-found", f"no such endpoint {req.method} {req.path}")
            if not role_allows(principal.role, route.permission):
                self.audit.append(principal_id, action, req.path, "deny")
                return _error(403, "forbidden",
                              f"role {principal.role.value} lacks {route.permission.value}")
            if len(req.body) > MAX_BODY_BYTES:
                self.audit.append(principal_id, action, req.path, "error")
                return _error(413, "too-large", "request body exceeds 5 MB")
            handler = getattr(self, route.handler_name)
            try:
                args = (req, ack_match.group(1)) if route.handler_name == "h_alert_ack" else (req,)
                resp = handler(*args)
            except _RequestError as exc:
                self.audit.append(principal_id, action, req.path, "error")
                return exc.resp
            except (q.QuerySyntaxError, q.EvaluationError, ValueError) as exc:
                self.audit.append(principal_id, action, req.path, "error")
                return _error(400, "bad-request", str(exc))
            except StoreError as exc:
                self.audit.append(principal_id, action, req.path, "error")
                return _error(500, "store-error", str(exc))
            except Exception:
                self.audit.append(principal_id, action, req.path, "error")
                return _error(500, "internal", "unexpected error")
            self.audit.append(principal_id, action, req.path, "allow")
            return resp
        except AuditUnavailableError:
            # fail closed: no audit record, no action
            return _error(503, "audit-unavailable", "audit log unavailable; request denied")

    # -- open endpoints --------------------------------------------------------

    def _healthz(self) -> ApiResponse:
        return _json_response(
            200,
            {
                "status": "ok",
                "store_open": True,
                "segments": len(self.store.segment_ids()),
                "events": self.store.event_count(),
            },
        )

    def _static(self, path: str) -> ApiResponse:
        if self.ui_dir is None:
            return _error(404, "not-found", "dashboard UI is not configured")
        rel = path[len("/ui"):].lstrip("/") or "index.html"
        target = (self.ui_dir / rel).resolve()
        if not target.is_relative_to(self.ui_dir.resolve()) or not target.is_file():
            return _error(404, "not-found", "no such asset")
        ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
        return ApiResponse(200, target.read_bytes(), ctype)

    # -- body helpers ------------------------------------------------------------

    def _json_body(self, req: ApiRequest):
        try:
            return json.loads(req.body or b"null")
        except json.JSONDecodeError:
            raise _RequestError(_error(422, "bad-body", "request body is not valid JSON"))

    # -- handlers ---------------------------------------------------------------

    def h_search(self, req: ApiRequest) -> ApiResponse:
        body = self._json_body(req)
        if not isinstance(body, dict) or not isinstance(body.get("query"), str):
            raise _RequestError(_error(422, "bad-body", 'body must be {"query": "..."}'))
        try:
            ast = q.parse(body["query"])
            earliest = body.get("earliest")
            latest = body.get("latest")
            if earliest is not None or latest is not None:
                time = q.QueryTime(
                    q.parse_time_bound(earliest) if earliest else ast.time.earliest,
                    q.parse_time_bound(latest) if latest else ast.time.latest,
                )
                ast = ast.with_time(time)
            table = q.evaluate(ast, self.store)
        except q.QuerySyntaxError as exc:
            raise _RequestError(
                _error(400, "syntax", str(exc), offset=exc.offset,
                       expected=list(exc.expected))
            )
        return ApiResponse(200, table.to_json_bytes())

    def h_summary(self, req: ApiRequest) -> ApiResponse:
        window = req.params.get("window", "24h")
        if window not in SUMMARY_WINDOWS:
            raise _RequestError(_error(400, "bad-window",
                                       f"window must be one of {', '.join(SUMMARY_WINDOWS)}"))
        now = utcnow()
        if window == "all":
            qt = q.QueryTime()
        else:
            qt = q.QueryTime(earliest=now - parse_duration(window))
        rng = qt.resolve(now)
        events = self.store.scan(rng)

        total_table = q.evaluate(q.QueryAst((), qt, (q.Command(q.CommandKind.STATS_COUNT),)), self.store, now)
        by_class = q.evaluate(
            q.QueryAst((), qt, (q.Command(q.CommandKind.STATS_COUNT, by_field="Class"),)),
            self.store, now,
        )
        counts = {c.value: 0 for c in NAMED_CATEGORIES}
        for value, count in by_class.rows:
            if value in counts:
                counts[value] = count

        if window == "all":
            if events:
                spread = (events[-1].event_time - events[0].event_time).total_seconds()
                span = timedelta(seconds=max(1, int(spread // 24) or 1))
            else:
                span = timedelta(hours=1)
        else:
            span = timedelta(seconds=max(1, int(parse_duration(window).total_seconds() // 24)))
        timechart = q.evaluate(
            q.QueryAst((), qt, (q.Command(q.CommandKind.TIMECHART, by_field="Class", span=span),)),
            self.store, now,
        ) if events else q.ResultTable(("bucket_start", "count"), ())

        latest_events = [json.loads(encode_event(e)) for e in events[-20:]][::-1]
        return _json_response(
            200,
            {
                "window": window,
                "generated_at": now.strftime("%Y-%m-%dT%H:%M:%SZ"),
                "total": total_table.rows[0][0] if total_table.rows else 0,
                "categories": counts,
                "timechart": {"columns": list(timechart.columns),
                              "rows": [list(r) for r in timechart.rows]},
                "latest_events": latest_events,
                "unacknowledged_alerts": self.alerts.unacknowledged_count(),
            },
        )

    def h_ingest(self, req: ApiRequest) -> ApiResponse:
        body = self._json_body(req)
        if not isinstance(body, list):
            raise _RequestError(_error(422, "bad-body", "body must be a JSON array of events"))
        if len(body) > MAX_INGEST_EVENTS:
            raise _RequestError(
                _error(413, "too-many-events", f"at most {MAX_INGEST_EVENTS} events per call")
            )
        results = []
        ok = 0
        now = utcnow()
        with self._write_lock:
            for item in body:
                if not isinstance(item, dict) or "external_id" not in item or "text" not in item:
                    results.append({"status": "violation", "violations": ["malformed"]})
                    continue
                try:
                    event_time = parse_rfc3339(item["event_time"]) if item.get("event_time") else now
                except ValueError:
                    event_time = now
                raw = RawEvent(
                    source_kind=item.get("source_kind", "rest-generic"),
                    external_id=str(item["external_id"]),
                    event_time=event_time,
                    author=str(item.get("author", "")),
                    text=str(item["text"]),
                    extra_fields={str(k): str(v) for k, v in (item.get("fields") or {}).items()},
                )
                status, detail = index_event(self.store, self.lex, raw, now=now)
                if status == "ok":
                    ok += 1
                    results.append({"status": "ok", "event_id": detail})
                elif status == "duplicate":
                    results.append({"status": "duplicate"})
                else:
                    results.append({"status": "violation", "violations": detail})
        return _json_response(200, {"ok": ok, "rejected": len(results) - ok, "results": results})

    def h_alerts_list(self, req: ApiRequest) -> ApiResponse:
        rng = TimeRange(
            parse_rfc3339(req.params["earliest"]) if "earliest" in req.params else None,
            parse_rfc3339(req.params["latest"]) if "latest" in req.params else None,
        )
        return _json_response(200, {"alerts": [a.to_json() for a in self.alerts.list_alerts(rng)]})

    def h_rules_list(self, req: ApiRequest) -> ApiResponse:
        return _json_response(200, {"rules": [r.to_json() for r in self.alerts.rules()]})

    def h_rules_put(self, req: ApiRequest) -> ApiResponse:
        body = self._json_body(req)
        if not isinstance(body, dict):
            raise _RequestError(_error(422, "bad-body", "body must be a rule object"))
        obj = dict(body)
        obj.setdefault("rule_id", f"rule-{len(self.alerts.rules()) + 1}")
        if "window" in obj and "window_s" not in obj:
            obj["window_s"] = int(parse_duration(obj.pop("window")).total_seconds())
        try:
            rule = AlertRule.from_json(obj)
        except (KeyError, ValueError, TypeError) as exc:
            raise _RequestError(_error(422, "bad-rule", str(exc)))
        self.alerts.put_rule(rule)
        return _json_response(201, rule.to_json())

    def h_alert_ack(self, req: ApiRequest, alert_id: str) -> ApiResponse:
        if not self.alerts.acknowledge(int(alert_id)):
            raise _RequestError(_error(404, "not-found", f"no alert {alert_id}"))
        return _json_response(200, {"alert_id": int(alert_id), "acknowledged": True})

    def h_keys_list(self, req: ApiRequest) -> ApiResponse:
        return _json_response(200, {"keys": self.registry.list_keys()})

    def h_keys_create(self, req: ApiRequest) -> ApiResponse:
        body = self._json_body(req)
        if not isinstance(body, dict) or "name" not in body or "role" not in body:
            raise _RequestError(_error(422, "bad-body", 'body must be {"name","role"}'))
        try:
            role = Role(body["role"])
        except ValueError:
            raise _RequestError(
                _error(422, "bad-role", f"role must be one of {[r.value for r in Role]}")
            )
        principal, token = self.registry.create_key(str(body["name"]), role)
        # the plaintext secret appears in this response and nowhere else
        return _json_response(
            201,
            {"key_id": token.split(".", 1)[0], "token": token,
             "principal_id": principal.principal_id, "role": role.value},
        )

    def h_audit(self, req: ApiRequest) -> ApiResponse:
        records = self.audit.records()
        limit = req.params.get("limit")
        if limit and limit.isdigit():
            records = records[-int(limit):]
        return _json_response(200, {"records": records})


# --- configuration and the socket layer ------------------------------------


@dataclass
class ServiceConfig:
    bind_host: str
    bind_port: int
    tls_cert: Path
    tls_key: Path
    store_dir: Path
    lexicon_path: Path
    vault_path: Path
    master_key_env: str = "OSINT_MASTER_KEY"
    retention_max_age: timedelta = timedelta(days=30)
    retention_max_bytes: int = 1 << 30
    bucket_span: timedelta = timedelta(hours=1)
    pollers: tuple[PollerConfig, ...] = ()
    ui_dir: Path | None = None

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ServiceConfig":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg = cls(
            bind_host=obj.get("bind_host", "127.0.0.1"),
            bind_port=obj.get("bind_port", 8443),
            tls_cert=Path(obj["tls_cert"]),
            tls_key=Path(obj["tls_key"]),
            store_dir=Path(obj["store_dir"]),
            lexicon_path=Path(obj["lexicon_path"]),
            vault_path=Path(obj["vault_path"]),
            master_key_env=obj.get("master_key_env", "OSINT_MASTER_KEY"),
            retention_max_age=parse_duration(obj.get("retention_max_age", "30d")),
            retention_max_bytes=obj.get("retention_max_bytes", 1 << 30),
            bucket_span=parse_duration(obj.get("bucket_span", "1h")),
            pollers=tuple(PollerConfig.from_json(p) for p in obj.get("pollers", ())),
            ui_dir=Path(obj["ui_dir"]) if obj.get("ui_dir") else None,
        )
        return cfg

    def validate(self) -> None:
        missing = [str(p) for p in (self.tls_cert, self.tls_key, self.lexicon_path) if not p.exists()]
        if missing:
            raise FileNotFoundError(f"config paths missing: {', '.join(missing)}")

    @property
    def retention(self) -> RetentionPolicy:
        return RetentionPolicy(self.retention_max_age, self.retention_max_bytes)


class HttpApiServer:
    """TLS 1.3-only HTTP front end over an Api instance."""

    def __init__(self, api: Api, host: str, port: int, ssl_context):
        self.api = api

        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            server_version = "osint-pipeline"

            def log_message(self, fmt, *args):  # keep request lines off stderr
                pass

            def _serve(self):
                split = urlsplit(self.path)
                params = {k: v[0] for k, v in parse_qs(split.query).items()}
                length = int(self.headers.get("Content-Length") or 0)
                if length > MAX_BODY_BYTES:
                    resp = _error(413, "too-large", "request body exceeds 5 MB")
                else:
                    body = self.rfile.read(length) if length else b""
                    req = ApiRequest(
                        method=self.command,
                        path=split.path,
                        params=params,
                        headers={k.lower(): v for k, v in self.headers.items()},
                        body=body,
                    )
                    resp = outer.api.handle(req)
                self.send_response(resp.status)
                self.send_header("Content-Type", resp.content_type)
                self.send_header("Content-Length", str(len(resp.body)))
                self.end_headers()
                self.wfile.write(resp.body)

            def do_GET(self):
                self._serve()

            def do_POST(self):
                self._serve()

            def do_DELETE(self):
                self._serve()

        class Server(ThreadingHTTPServer):
            daemon_threads = True

            def handle_error(self, request, client_address):
                # TLS handshake failures from non-1.3 clients are expected noise
                pass

        self._server = Server((host, port), Handler)
        self._server.socket = ssl_context.wrap_socket(self._server.socket, server_side=True)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()


# --- assembly ----------------------------------------------------------------

STORE_MASTER_SECRET = "store-master-key"


@dataclass
class Runtime:
    config: ServiceConfig
    vault: "SecretVault"
    store: EventStore
    lex: Lexicon
    registry: KeyRegistry
    audit: AuditLog
    alerts: AlertEngine
    api: Api

    def close(self) -> None:
        self.store.close()
        self.audit.close()


def build_runtime(config: ServiceConfig, check_tls: bool = True) -> Runtime:
    """Wire vault -> store -> lexicon -> security -> alerts into an Api.

    Fails loudly at startup on a missing master key, lexicon, or TLS
    material; creates the store directory and vault on first run.
    """
    from .lexicon import load_lexicon
    from .security import SecretVault

    if check_tls:
        config.validate()
    elif not config.lexicon_path.exists():
        raise FileNotFoundError(f"lexicon not found: {config.lexicon_path}")
    config.store_dir.mkdir(parents=True, exist_ok=True)
    vault = SecretVault(config.vault_path, config.master_key_env)
    vault.get_or_create(STORE_MASTER_SECRET)  # raises if the master env var is unset
    audit = AuditLog(config.store_dir / "audit.log")

    def store_audit(action: str, resource: str, outcome: str) -> None:
        audit.append("system", action, resource, outcome)

    store = EventStore(
        config.store_dir,
        master_key_provider=lambda: vault.get(STORE_MASTER_SECRET),
        bucket_span=config.bucket_span,
        audit_hook=store_audit,
    )
    lex = load_lexicon(config.lexicon_path)
    registry = KeyRegistry(config.store_dir / "keys.json")
    alerts = AlertEngine(config.store_dir / "alerts")
    api = Api(store, lex, registry, audit, alerts, ui_dir=config.ui_dir)
    return Runtime(config, vault, store, lex, registry, audit, alerts, api)


def serve(config: ServiceConfig, stop: threading.Event | None = None,
          ready: threading.Event | None = None) -> None:
    """Run the TLS service (and any configured pollers) until stopped."""
    from .ingest import PollerState, https_transport, run_poller
    from .security import tls_policy

    rt = build_runtime(config)
    ctx = tls_policy(config.tls_cert, config.tls_key)
    server = HttpApiServer(rt.api, config.bind_host, config.bind_port, ctx)
    stop = stop or threading.Event()
    poller_threads = []
    for pcfg in config.pollers:
        bearer = rt.vault.get(pcfg.auth_secret_name).decode()
        state = PollerState(pcfg.state_path or config.store_dir / "poller-state.json")

        def _run(pc=pcfg, st=state, tok=bearer):
            run_poller(pc, rt.store, rt.lex, https_transport(tok), stop, state=st,
                       audit_hook=lambda a, r, o: rt.audit.append("system", a, r, o))

        t = threading.Thread(target=_run, daemon=True)
        t.start()
        poller_threads.append(t)
    server.start()
    if ready is not None:
        ready.set()
    try:
        stop.wait()
    finally:
        server.shutdown()
        rt.close()
