"""Security plumbing: API-key authentication, role-based authorization, a
tamper-evident hash-chained audit log, an encrypted secret vault, and the
TLS listener policy.

Every guarded action is audited; denial paths fail closed when the audit
log itself is unavailable.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
import secrets
from dataclasses import dataclass
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path

from cryptography import x509
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from filelock import FileLock

from .timeutil import parse_rfc3339, to_rfc3339, utcnow

GENESIS_HASH = "0" * 64

VAULT_MAGIC = b"OSINTVLT0000001\n"
assert len(VAULT_MAGIC) == 16

DEFAULT_MASTER_KEY_ENV = "OSINT_MASTER_KEY"


class Role(Enum):
    ADMIN = "admin"
    ANALYST = "analyst"
    AUDITOR = "auditor"
    INGESTOR = "ingestor"


class Permission(Enum):
    SEARCH = "search"
    INGEST = "ingest"
    MANAGE_ALERTS = "manage-alerts"
    MANAGE_USERS = "manage-users"
    READ_AUDIT = "read-audit"


#: the complete role -> permission matrix; every pair is defined
ROLE_PERMISSIONS: dict[Role, frozenset[Permission]] = {
    Role.ADMIN: frozenset(Permission),
    Role.ANALYST: frozenset({Permission.SEARCH, Permission.MANAGE_ALERTS}),
    Role.AUDITOR: frozenset({Permission.READ_AUDIT}),
    Role.INGESTOR: frozenset({Permission.INGEST}),
}


def role_allows(role: Role, permission: Permission) -> bool:
    return permission in ROLE_PERMISSIONS[role]


@dataclass(frozen=True)
class Principal:
    principal_id: str
    display_name: str
    role: Role


#: principal_id recorded on audit records for unauthenticated requests
ANONYMOUS_ID = "anonymous"


class AuthenticationError(Exception):
    """Single opaque failure kind: revoked, unknown, and malformed keys are
    indistinguishable to the caller."""

    def __init__(self):
        super().__init__("authentication failed")


class AuditUnavailableError(Exception):
    pass


# --- API keys ---------------------------------------------------------------


def _hash_secret(salt: bytes, secret: str) -> str:
    return hashlib.sha256(salt + secret.encode()).hexdigest()


class KeyRegistry:
    """Principals and their API keys, persisted as JSON without plaintext
    secrets. Presented key format: `key_id.secret`."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._principals: dict[str, Principal] = {}
        self._keys: dict[str, dict] = {}
        # fixed-cost comparison target for unknown key ids
        self._decoy_salt = secrets.token_bytes(16)
        self._decoy_hash = _hash_secret(self._decoy_salt, secrets.token_hex(18))
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        obj = json.loads(self.path.read_text(encoding="utf-8"))
        for p in obj.get("principals", []):
            self._principals[p["principal_id"]] = Principal(
                p["principal_id"], p["display_name"], Role(p["role"])
            )
        for k in obj.get("keys", []):
            self._keys[k["key_id"]] = k

    def _save(self) -> None:
        obj = {
            "principals": [
                {"principal_id": p.principal_id, "display_name": p.display_name, "role": p.role.value}
                for p in self._principals.values()
            ],
            "keys": list(self._keys.values()),
        }
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(obj, indent=1), encoding="utf-8")
        os.replace(tmp, self.path)

    def create_key(self, display_name: str, role: Role) -> tuple[Principal, str]:
        """Create a principal and its API key; the returned token is the only
        time the plaintext secret exists outside the caller."""
        principal = Principal(f"p-{secrets.token_hex(6)}", display_name, role)
        key_id = secrets.token_hex(8)
        secret = secrets.token_urlsafe(24)
        salt = secrets.token_bytes(16)
        self._principals[principal.principal_id] = principal
        self._keys[key_id] = {
            "key_id": key_id,
            "salt": salt.hex(),
            "hash": _hash_secret(salt, secret),
            "principal_id": principal.principal_id,
            "created_at": to_rfc3339(utcnow()),
            "revoked": False,
        }
        self._save()
        return principal, f"{key_id}.{secret}"

    def revoke(self, key_id: str) -> bool:
        key = self._keys.get(key_id)
        if key is None:
            return False
        key["revoked"] = True
        self._save()
        return True

    def list_keys(self) -> list[dict]:
        out = []
        for k in self._keys.values():
            p = self._principals.get(k["principal_id"])
            out.append(
                {
                    "key_id": k["key_id"],
                    "principal_id": k["principal_id"],
                    "display_name": p.display_name if p else "",
                    "role": p.role.value if p else "",
                    "created_at": k["created_at"],
                    "revoked": k["revoked"],
                }
            )
        return out

    def authenticate(self, presented: str) -> Principal:
        """Resolve `key_id.secret` to a Principal.

        Unknown, malformed, and revoked keys all take the hash-comparison
        path and raise the same opaque error.
        """
        key_id, sep, secret = presented.partition(".")
        key = self._keys.get(key_id) if sep else None
        if key is None:
            # burn the same work as a real comparison
            hmac.compare_digest(_hash_secret(self._decoy_salt, secret), self._decoy_hash)
            raise AuthenticationError()
        candidate = _hash_secret(bytes.fromhex(key["salt"]), secret)
        ok = hmac.compare_digest(candidate, key["hash"])
        if not ok or key["revoked"]:
            raise AuthenticationError()
        principal = self._principals.get(key["principal_id"])
        if principal is None:
            raise AuthenticationError()
        return principal


# --- audit log ----------------------------------------------------------


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    time: datetime
    principal_id: str
    action: str
    resource: str
    outcome: str  # allow | deny | error
    prev_hash: str
    record_hash: str


def _record_hash(seq: int, time_s: str, principal_id: str, action: str,
                 resource: str, outcome: str, prev_hash: str) -> str:
    canonical = json.dumps(
        {
            "seq": seq,
            "time": time_s,
            "principal_id": principal_id,
            "action": action,
            "resource": resource,
            "outcome": outcome,
            "prev_hash": prev_hash,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    return hashlib.sha256(canonical).hexdigest()


class AuditLog:
    """Append-only hash-chained log; every record's digest covers the
    previous record's digest, so any persisted-byte tamper is detectable."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._seq = 0
        self._prev_hash = GENESIS_HASH
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                obj = json.loads(line)
                self._seq = obj["seq"]
                self._prev_hash = obj["record_hash"]
        self._fh = self.path.open("a", encoding="utf-8")

    def append(self, principal_id: str, action: str, resource: str, outcome: str) -> AuditRecord:
        if self._fh is None or self._fh.closed:
            raise AuditUnavailableError("audit log is closed")
        seq = self._seq + 1
        now = utcnow()
        time_s = to_rfc3339(now)
        prev_hash = self._prev_hash
        record_hash = _record_hash(seq, time_s, principal_id, action, resource, outcome, prev_hash)
        line = json.dumps(
            {
                "seq": seq,
                "time": time_s,
                "principal_id": principal_id,
                "action": action,
                "resource": resource,
                "outcome": outcome,
                "prev_hash": prev_hash,
                "record_hash": record_hash,
            },
            separators=(",", ":"),
        )
        try:
            self._fh.write(line + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError as exc:
            raise AuditUnavailableError(str(exc)) from exc
        self._seq = seq
        self._prev_hash = record_hash
        return AuditRecord(seq, now, principal_id, action, resource, outcome,
                           prev_hash=prev_hash, record_hash=record_hash)

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                out.append(json.loads(line))
        return out

    def close(self) -> None:
        if self._fh and not self._fh.closed:
            self._fh.close()


def verify_chain(path: str | Path) -> tuple[bool, int | None]:
    """Recompute the hash chain; returns (ok, first bad seq or None).

    Detects any modified byte, a broken prev link, and seq gaps."""
    path = Path(path)
    if not path.exists():
        return True, None
    prev_hash = GENESIS_HASH
    expected_seq = 1
    for raw_line in path.read_bytes().split(b"\n"):
        if not raw_line.strip():
            continue
        try:
            obj = json.loads(raw_line.decode("utf-8"))
            seq = obj["seq"]
            recomputed = _record_hash(
                seq, obj["time"], obj["principal_id"], obj["action"],
                obj["resource"], obj["outcome"], obj["prev_hash"],
            )
            if (
                seq != expected_seq
                or obj["prev_hash"] != prev_hash
                or obj["record_hash"] != recomputed
            ):
                return False, expected_seq
        except (json.JSONDecodeError, KeyError, TypeError, UnicodeDecodeError):
            return False, expected_seq
        prev_hash = obj["record_hash"]
        expected_seq += 1
    return True, None


# --- secret vault ---------------------------------------------------------


class VaultError(Exception):
    pass


class MissingMasterKeyError(VaultError):
    def __init__(self, env_name: str):
        super().__init__(
            f"vault master key not found: set the {env_name} environment variable"
        )


class VaultIntegrityError(VaultError):
    pass


class SecretNotFoundError(VaultError):
    pass


class SecretVault:
    """File-backed versioned secret store, encrypted as one authenticated
    blob under a master key supplied via the environment.

    Puts never overwrite: each put creates version n+1.  The file is
    replaced atomically (write-temp-rename) and mutations take an exclusive
    file lock.
    """

    def __init__(self, path: str | Path, master_key_env: str = DEFAULT_MASTER_KEY_ENV):
        self.path = Path(path)
        self.master_key_env = master_key_env
        self._lock = FileLock(str(self.path) + ".lock")

    def _master_key(self) -> bytes:
        value = os.environ.get(self.master_key_env)
        if not value:
            raise MissingMasterKeyError(self.master_key_env)
        return hashlib.sha256(value.encode()).digest()

    def _load(self) -> dict[str, list[str]]:
        if not self.path.exists():
            return {}
        blob = self.path.read_bytes()
        if not blob.startswith(VAULT_MAGIC):
            raise VaultIntegrityError("vault file has wrong magic prefix")
        body = blob[len(VAULT_MAGIC):]
        nonce, ct = body[:12], body[12:]
        try:
            plain = AESGCM(self._master_key()).decrypt(nonce, ct, VAULT_MAGIC)
        except InvalidTag:
            raise VaultIntegrityError("vault authenticated decryption failed") from None
        return json.loads(plain)

    def _store(self, entries: dict[str, list[str]]) -> None:
        nonce = secrets.token_bytes(12)
        ct = AESGCM(self._master_key()).encrypt(
            nonce, json.dumps(entries).encode(), VAULT_MAGIC
        )
        tmp = self.path.with_suffix(".tmp")
        tmp.write_bytes(VAULT_MAGIC + nonce + ct)
        os.replace(tmp, self.path)

    def put(self, name: str, secret: bytes) -> int:
        with self._lock:
            entries = self._load()
            versions = entries.setdefault(name, [])
            versions.append(secret.hex())
            self._store(entries)
            return len(versions)

    def get(self, name: str, version: int | None = None) -> bytes:
        entries = self._load()
        versions = entries.get(name)
        if not versions:
            raise SecretNotFoundError(f"no secret named {name!r}")
        if version is None:
            return bytes.fromhex(versions[-1])
        if not 1 <= version <= len(versions):
            raise SecretNotFoundError(f"secret {name!r} has no version {version}")
        return bytes.fromhex(versions[version - 1])

    def get_or_create(self, name: str, nbytes: int = 32) -> bytes:
        with self._lock:
            entries = self._load()
            versions = entries.get(name)
            if versions:
                return bytes.fromhex(versions[-1])
            secret = secrets.token_bytes(nbytes)
            entries[name] = [secret.hex()]
            self._store(entries)
            return secret


# --- TLS policy -----------------------------------------------------------


class TlsConfigError(Exception):
    pass


def tls_policy(cert_path: str | Path, key_path: str | Path):
    """Build the listener's SSL context: TLS 1.3 only, certificate chain
    from the configured paths. Refuses missing or expired certificates."""
    import ssl

    cert_path, key_path = Path(cert_path), Path(key_path)
    for p in (cert_path, key_path):
        if not p.exists():
            raise TlsConfigError(f"missing TLS file: {p}")
    cert = x509.load_pem_x509_certificate(cert_path.read_bytes())
    if cert.not_valid_after_utc < utcnow():
        raise TlsConfigError(f"certificate expired {cert.not_valid_after_utc.isoformat()}")
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_3
    ctx.maximum_version = ssl.TLSVersion.TLSv1_3
    ctx.load_cert_chain(certfile=str(cert_path), keyfile=str(key_path))
    return ctx


def generate_self_signed_cert(directory: str | Path, hostname: str = "localhost",
                              days: int = 365) -> tuple[Path, Path]:
    """Development/test helper: write a self-signed cert and key pair."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    key = ec.generate_private_key(ec.SECP256R1())
    name = x509.Name([x509.NameAttribute(x509.NameOID.COMMON_NAME, hostname)])
    now = utcnow()
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - timedelta(minutes=5))
        .not_valid_after(now + timedelta(days=days))
        .add_extension(x509.SubjectAlternativeName([x509.DNSName(hostname)]), critical=False)
        .sign(key, hashes.SHA256())
    )
    cert_path = directory / "server.crt"
    key_path = directory / "server.key"
    cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    key_path.write_bytes(
        key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
    )
    return cert_path, key_path
