import json
import socket
import ssl

import pytest

from osintpipe.alerts import AlertEngine
from osintpipe.security import (
    AuditLog,
    KeyRegistry,
    Role,
    TlsConfigError,
    generate_self_signed_cert,
    tls_policy,
)
from osintpipe.service import Api, HttpApiServer
from osintpipe.store import EventStore

from conftest import TEST_MASTER_KEY


@pytest.fixture(scope="module")
def cert_pair(tmp_path_factory):
    return generate_self_signed_cert(tmp_path_factory.mktemp("tls"))


@pytest.fixture
def server(tmp_path, lexicon, cert_pair):
    cert, key = cert_pair
    store = EventStore(tmp_path / "store", master_key_provider=lambda: TEST_MASTER_KEY)
    registry = KeyRegistry(tmp_path / "keys.json")
    audit = AuditLog(tmp_path / "audit.log")
    api = Api(store, lexicon, registry, audit, AlertEngine(tmp_path / "alerts"))
    _, token = registry.create_key("tester", Role.ADMIN)
    srv = HttpApiServer(api, "127.0.0.1", 0, tls_policy(cert, key))
    srv.start()
    yield srv, token
    srv.shutdown()
    store.close()
    audit.close()


def _client_ctx(maximum=None):
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_NONE
    if maximum is not None:
        ctx.maximum_version = maximum
    return ctx


class TestTlsPolicy:
    def test_tls13_handshake_succeeds(self, server):
        srv, _ = server
        with socket.create_connection(("127.0.0.1", srv.port), timeout=5) as sock:
            with _client_ctx().wrap_socket(sock, server_hostname="localhost") as tls:
                assert tls.version() == "TLSv1.3"

    def test_tls12_handshake_rejected(self, server):
        srv, _ = server
        with socket.create_connection(("127.0.0.1", srv.port), timeout=5) as sock:
            with pytest.raises(ssl.SSLError):
                _client_ctx(maximum=ssl.TLSVersion.TLSv1_2).wrap_socket(
                    sock, server_hostname="localhost"
                )

    def test_plaintext_http_gets_no_application_bytes(self, server):
        srv, _ = server
        with socket.create_connection(("127.0.0.1", srv.port), timeout=5) as sock:
            sock.sendall(b"GET /healthz HTTP/1.1\r\nHost: localhost\r\n\r\n")
            sock.settimeout(5)
            chunks = b""
            try:
                while True:
                    got = sock.recv(4096)
                    if not got:
                        break
                    chunks += got
            except (socket.timeout, ConnectionError):
                pass
        # a TLS alert is tolerable; an HTTP response is not
        assert not chunks.startswith(b"HTTP/")
        assert b"200" not in chunks

    def test_full_request_over_tls13(self, server):
        srv, token = server
        ctx = _client_ctx()
        with socket.create_connection(("127.0.0.1", srv.port), timeout=5) as sock:
            with ctx.wrap_socket(sock, server_hostname="localhost") as tls:
                tls.sendall(b"GET /healthz HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
                data = b""
                while True:
                    got = tls.recv(4096)
                    if not got:
                        break
                    data += got
        head, _, body = data.partition(b"\r\n\r\n")
        assert head.startswith(b"HTTP/1.1 200")
        assert json.loads(body)["status"] == "ok"

    def test_authenticated_search_over_tls(self, server):
        srv, token = server
        ctx = _client_ctx()
        payload = json.dumps({"query": "sourcetype=csv | stats count"}).encode()
        req = (
            b"POST /api/v1/search HTTP/1.1\r\nHost: x\r\n"
            b"Authorization: Bearer " + token.encode() + b"\r\n"
            b"Content-Type: application/json\r\n"
            b"Content-Length: " + str(len(payload)).encode() + b"\r\n"
            b"Connection: close\r\n\r\n" + payload
        )
        with socket.create_connection(("127.0.0.1", srv.port), timeout=5) as sock:
            with ctx.wrap_socket(sock, server_hostname="localhost") as tls:
                tls.sendall(req)
                data = b""
                while True:
                    got = tls.recv(4096)
                    if not got:
                        break
                    data += got
        head, _, body = data.partition(b"\r\n\r\n")
        assert head.startswith(b"HTTP/1.1 200")
        assert json.loads(body) == {"columns": ["count"], "rows": [[0]]}


class TestTlsConfig:
    def test_missing_cert_refuses_start(self, tmp_path):
        with pytest.raises(TlsConfigError):
            tls_policy(tmp_path / "nope.crt", tmp_path / "nope.key")

    def test_expired_cert_refuses_start(self, tmp_path):
        cert, key = generate_self_signed_cert(tmp_path, days=-2)
        with pytest.raises(TlsConfigError) as exc:
            tls_policy(cert, key)
        assert "expired" in str(exc.value)

    def test_context_pins_tls13(self, cert_pair):
        cert, key = cert_pair
        ctx = tls_policy(cert, key)
        assert ctx.minimum_version == ssl.TLSVersion.TLSv1_3
        assert ctx.maximum_version == ssl.TLSVersion.TLSv1_3
