"""Operator command line: serve, load data, query, administer keys.

Local subcommands act on the store directory directly with filesystem
trust (no API auth): the first admin key has to come from somewhere.
Diagnostics go to stderr, data to stdout; exit codes are 0 (success),
1 (operational error), 2 (usage error).
"""

from __future__ import annotations

import signal
import sys
import threading
from pathlib import Path

import click
from filelock import FileLock, Timeout

from . import query as q
from .ingest import (
    IngestError,
    PollerConfig,
    PollerState,
    load_csv,
    run_poller,
)
from .lexicon import LexiconError, load_lexicon
from .replay import ReplaySource
from .security import (
    DEFAULT_MASTER_KEY_ENV,
    KeyRegistry,
    Role,
    SecretVault,
    VaultError,
    verify_chain,
)
from .service import STORE_MASTER_SECRET, ServiceConfig, build_runtime, serve
from .store import EventStore, RetentionPolicy, StoreError
from .timeutil import parse_duration

FIXTURES_DIR = Path(__file__).parent / "fixtures"
DEFAULT_LEXICON = FIXTURES_DIR / "lexicon.txt"


def _fail(message: str, code: int = 1):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


class _Env:
    def __init__(self, store_dir: Path, lexicon: Path, vault: Path, master_env: str):
        self.store_dir = store_dir
        self.lexicon_path = lexicon
        self.vault_path = vault
        self.master_env = master_env

    def vault(self) -> SecretVault:
        return SecretVault(self.vault_path, self.master_env)

    def key_provider(self):
        vault = self.vault()

        def provider() -> bytes:
            return vault.get_or_create(STORE_MASTER_SECRET)

        return provider

    def open_store(self, read_only: bool = False) -> EventStore:
        return EventStore(self.store_dir, self.key_provider(), read_only=read_only)

    def lexicon(self):
        return load_lexicon(self.lexicon_path)

    def write_lock(self) -> FileLock:
        self.store_dir.mkdir(parents=True, exist_ok=True)
        return FileLock(self.store_dir / ".store.lock", timeout=10)


@click.group()
@click.option("--store-dir", envvar="OSINT_STORE_DIR", default="./osint-data",
              type=click.Path(path_type=Path), help="Store directory.")
@click.option("--lexicon", "lexicon_path", default=str(DEFAULT_LEXICON), show_default=False,
              type=click.Path(path_type=Path), help="Lexicon file (defaults to the bundled one).")
@click.option("--vault", "vault_path", default=None, type=click.Path(path_type=Path),
              help="Vault file (default <store-dir>/vault.bin).")
@click.option("--master-key-env", default=DEFAULT_MASTER_KEY_ENV, show_default=True,
              help="Environment variable holding the vault master key.")
@click.pass_context
def main(ctx, store_dir: Path, lexicon_path: Path, vault_path: Path | None, master_key_env: str):
    """Secure OSINT pipeline operator tool."""
    ctx.obj = _Env(store_dir, lexicon_path, vault_path or store_dir / "vault.bin", master_key_env)


@main.command("load-csv")
@click.option("--file", "path", required=True, type=click.Path(path_type=Path))
@click.option("--text-col", default="Tweet", show_default=True)
@click.option("--label-col", default="Class", show_default=True)
@click.pass_obj
def load_csv_cmd(env: _Env, path: Path, text_col: str, label_col: str):
    """Load a labeled CSV dataset into the store."""
    try:
        lex = env.lexicon()
        with env.write_lock():
            store = env.open_store()
            try:
                report = load_csv(store, lex, path, text_col=text_col, label_col=label_col)
            finally:
                store.close()
    except Timeout:
        _fail("store is locked by another writer")
    except (IngestError, LexiconError, StoreError, VaultError, OSError) as exc:
        _fail(str(exc))
    for v in report.violations:
        click.echo(v, err=True)
    click.echo(f"ok={report.ok} rejected={report.rejected}")
    sys.exit(0 if report.rejected == 0 else 1)


@main.command("search")
@click.argument("query_text")
@click.option("--json", "as_json", is_flag=True, help="Emit the JSON serialization.")
@click.pass_obj
def search_cmd(env: _Env, query_text: str, as_json: bool):
    """Evaluate a query against the local store."""
    try:
        ast = q.parse(query_text)
    except q.QuerySyntaxError as exc:
        click.echo(str(exc), err=True)
        sys.exit(2)
    try:
        store = env.open_store(read_only=True)
        try:
            table = q.evaluate(ast, store)
        finally:
            store.close()
    except (q.EvaluationError, StoreError, VaultError, OSError) as exc:
        _fail(str(exc))
    if as_json:
        sys.stdout.buffer.write(table.to_json_bytes())
        sys.stdout.buffer.flush()
    else:
        click.echo(table.to_text())
    sys.exit(0)


@main.group("keys")
def keys_group():
    """Administer API keys (local root trust)."""


@keys_group.command("create")
@click.option("--name", required=True)
@click.option("--role", required=True,
              type=click.Choice([r.value for r in Role], case_sensitive=False))
@click.pass_obj
def keys_create_cmd(env: _Env, name: str, role: str):
    """Create a principal and print its API key once."""
    env.store_dir.mkdir(parents=True, exist_ok=True)
    registry = KeyRegistry(env.store_dir / "keys.json")
    _, token = registry.create_key(name, Role(role.lower()))
    click.echo(token)


@main.command("audit-verify")
@click.pass_obj
def audit_verify_cmd(env: _Env):
    """Verify the audit log hash chain."""
    ok, bad_seq = verify_chain(env.store_dir / "audit.log")
    if ok:
        click.echo("ok")
        sys.exit(0)
    click.echo(f"bad-seq={bad_seq}")
    sys.exit(1)


@main.command("retention-run")
@click.option("--max-age", default="30d", show_default=True, help="e.g. 24h, 30d")
@click.option("--max-bytes", default=1 << 30, show_default=True, type=int)
@click.option("--seal-idle/--no-seal-idle", default=True, show_default=True,
              help="Seal segments whose bucket has ended before enforcing retention.")
@click.pass_obj
def retention_run_cmd(env: _Env, max_age: str, max_bytes: int, seal_idle: bool):
    """Seal idle segments and delete expired/over-budget sealed segments."""
    try:
        policy = RetentionPolicy(parse_duration(max_age), max_bytes)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    try:
        with env.write_lock():
            store = env.open_store()
            try:
                if seal_idle:
                    store.seal_idle()
                deleted = store.enforce_retention(policy)
            finally:
                store.close()
    except Timeout:
        _fail("store is locked by another writer")
    except (StoreError, VaultError, OSError) as exc:
        _fail(str(exc))
    if deleted:
        click.echo(f"deleted={len(deleted)} ids={','.join(str(i) for i in deleted)}")
    else:
        click.echo("deleted=0")
    sys.exit(0)


@main.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
def serve_cmd(config_path: Path):
    """Run the TLS API service until interrupted."""
    try:
        config = ServiceConfig.from_json_file(config_path)
        stop = threading.Event()

        def _signal(_sig, _frame):
            stop.set()

        signal.signal(signal.SIGINT, _signal)
        signal.signal(signal.SIGTERM, _signal)
        click.echo(f"serving on https://{config.bind_host}:{config.bind_port}", err=True)
        serve(config, stop=stop)
    except (OSError, VaultError, StoreError, LexiconError, ValueError) as exc:
        _fail(str(exc))
    sys.exit(0)


@main.command("poll")
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
@click.option("--replay", "replay_dir", required=True, type=click.Path(path_type=Path),
              help="Replay fixture directory (hermetic; no network).")
def poll_cmd(config_path: Path, replay_dir: Path):
    """Poll a replay fixture through the full ingest pipeline."""
    import json
    from datetime import timedelta

    try:
        config = ServiceConfig.from_json_file(config_path)
        rt = build_runtime(config, check_tls=False)
        pcfg = config.pollers[0] if config.pollers else PollerConfig(
            endpoint_url="https://replay.invalid/2/tweets/search/recent",
        )
        pcfg.poll_interval = timedelta(seconds=1)  # replay needn't pace like live
        source = ReplaySource(Path(replay_dir))
        state = PollerState(pcfg.state_path or config.store_dir / "poller-state.json")
        stop = threading.Event()

        # wrap the source so the run ends after the first empty page
        def transport(url, params, headers):
            status, body = source(url, params, headers)
            if status == 200:
                try:
                    if not json.loads(body).get("data"):
                        stop.set()
                except ValueError:
                    pass
            return status, body

        appended = run_poller(pcfg, rt.store, rt.lex, transport, stop, state=state)
        rt.close()
    except (OSError, VaultError, StoreError, LexiconError, ValueError, IngestError) as exc:
        _fail(str(exc))
    click.echo(f"ingested={appended}")
    sys.exit(0)


if __name__ == "__main__":
    main()
