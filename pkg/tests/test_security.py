import json
import os
import random

import pytest

from osintpipe.security import (
    AuditLog,
    AuthenticationError,
    GENESIS_HASH,
    KeyRegistry,
    MissingMasterKeyError,
    Permission,
    Role,
    ROLE_PERMISSIONS,
    SecretNotFoundError,
    SecretVault,
    VAULT_MAGIC,
    VaultIntegrityError,
    role_allows,
    verify_chain,
)

# the authoritative matrix, spelled out as data for the exhaustive check
EXPECTED_MATRIX = {
    (Role.ADMIN, Permission.SEARCH): True,
    (Role.ADMIN, Permission.INGEST): True,
    (Role.ADMIN, Permission.MANAGE_ALERTS): True,
    (Role.ADMIN, Permission.MANAGE_USERS): True,
    (Role.ADMIN, Permission.READ_AUDIT): True,
    (Role.ANALYST, Permission.SEARCH): True,
    (Role.ANALYST, Permission.INGEST): False,
    (Role.ANALYST, Permission.MANAGE_ALERTS): True,
    (Role.ANALYST, Permission.MANAGE_USERS): False,
    (Role.ANALYST, Permission.READ_AUDIT): False,
    (Role.AUDITOR, Permission.SEARCH): False,
    (Role.AUDITOR, Permission.INGEST): False,
    (Role.AUDITOR, Permission.MANAGE_ALERTS): False,
    (Role.AUDITOR, Permission.MANAGE_USERS): False,
    (Role.AUDITOR, Permission.READ_AUDIT): True,
    (Role.INGESTOR, Permission.SEARCH): False,
    (Role.INGESTOR, Permission.INGEST): True,
    (Role.INGESTOR, Permission.MANAGE_ALERTS): False,
    (Role.INGESTOR, Permission.MANAGE_USERS): False,
    (Role.INGESTOR, Permission.READ_AUDIT): False,
}


class TestRbac:
    def test_matrix_is_total(self):
        for role in Role:
            for perm in Permission:
                assert (role, perm) in EXPECTED_MATRIX
                assert isinstance(role_allows(role, perm), bool)

    def test_exhaustive_matrix_equals_table(self):
        for (role, perm), expected in EXPECTED_MATRIX.items():
            assert role_allows(role, perm) is expected, (role, perm)

    def test_spot_checks(self):
        assert role_allows(Role.AUDITOR, Permission.INGEST) is False
        assert role_allows(Role.ADMIN, Permission.READ_AUDIT) is True

    def test_permissions_cover_all_roles(self):
        assert set(ROLE_PERMISSIONS) == set(Role)


class TestApiKeys:
    def test_create_and_authenticate(self, tmp_path):
        reg = KeyRegistry(tmp_path / "keys.json")
        principal, token = reg.create_key("ana", Role.ANALYST)
        assert reg.authenticate(token) == principal
        assert principal.role is Role.ANALYST

    def test_revoked_key_fails_like_unknown(self, tmp_path):
        reg = KeyRegistry(tmp_path / "keys.json")
        _, token = reg.create_key("ana", Role.ANALYST)
        reg.revoke(token.split(".")[0])
        with pytest.raises(AuthenticationError) as revoked_exc:
            reg.authenticate(token)
        with pytest.raises(AuthenticationError) as unknown_exc:
            reg.authenticate("deadbeef.notasecret")
        assert str(revoked_exc.value) == str(unknown_exc.value)

    def test_malformed_token(self, tmp_path):
        reg = KeyRegistry(tmp_path / "keys.json")
        with pytest.raises(AuthenticationError):
            reg.authenticate("abc")

    def test_wrong_secret_fails(self, tmp_path):
        reg = KeyRegistry(tmp_path / "keys.json")
        _, token = reg.create_key("ana", Role.ANALYST)
        key_id = token.split(".")[0]
        with pytest.raises(AuthenticationError):
            reg.authenticate(f"{key_id}.wrong")

    def test_no_plaintext_secret_persisted(self, tmp_path):
        path = tmp_path / "keys.json"
        reg = KeyRegistry(path)
        _, token = reg.create_key("ana", Role.ANALYST)
        secret = token.split(".", 1)[1]
        assert secret not in path.read_text()

    def test_registry_survives_reload(self, tmp_path):
        path = tmp_path / "keys.json"
        _, token = KeyRegistry(path).create_key("ana", Role.ANALYST)
        again = KeyRegistry(path)
        assert again.authenticate(token).display_name == "ana"


class TestAuditChain:
    def test_seqs_are_gapless_and_chain_verifies(self, tmp_path):
        path = tmp_path / "audit.log"
        log = AuditLog(path)
        records = [log.append("p1", "search", "/api/v1/search", "allow") for _ in range(3)]
        assert [r.seq for r in records] == [1, 2, 3]
        assert verify_chain(path) == (True, None)
        log.close()

    def test_genesis_prev_hash_is_zero(self, tmp_path):
        path = tmp_path / "audit.log"
        log = AuditLog(path)
        rec = log.append("p1", "search", "r", "allow")
        assert rec.prev_hash == GENESIS_HASH == "0" * 64
        first = json.loads(path.read_text().splitlines()[0])
        assert first["prev_hash"] == "0" * 64
        log.close()

    def test_tamper_record_two_detected_at_two(self, tmp_path):
        path = tmp_path / "audit.log"
        log = AuditLog(path)
        for i in range(3):
            log.append("p1", "search", f"r{i}", "allow")
        log.close()
        lines = path.read_text().splitlines()
        lines[1] = lines[1].replace('"allow"', '"deny"', 1)
        path.write_text("\n".join(lines) + "\n")
        assert verify_chain(path) == (False, 2)

    def test_append_continues_chain_across_reopen(self, tmp_path):
        path = tmp_path / "audit.log"
        log1 = AuditLog(path)
        log1.append("p", "a", "r", "allow")
        log1.close()
        log2 = AuditLog(path)
        log2.append("p", "a", "r", "allow")
        log2.close()
        assert verify_chain(path) == (True, None)

    def test_random_single_byte_tampers_detected(self, tmp_path):
        rng = random.Random(99)
        path = tmp_path / "audit.log"
        log = AuditLog(path)
        for i in range(10):
            log.append(f"p{i}", "action", f"res{i}", "allow" if i % 2 else "deny")
        log.close()
        clean = path.read_bytes()
        assert verify_chain(path) == (True, None)
        for _ in range(20):
            corrupt = bytearray(clean)
            pos = rng.randrange(len(corrupt))
            bit = 1 << rng.randrange(8)
            corrupt[pos] ^= bit
            path.write_bytes(bytes(corrupt))
            ok, bad_seq = verify_chain(path)
            assert not ok
            # the reported seq must be the first record whose bytes changed
            line_no = clean[:pos].count(b"\n")
            assert bad_seq == line_no + 1
        path.write_bytes(clean)
        assert verify_chain(path) == (True, None)


class TestVault:
    @pytest.fixture(autouse=True)
    def master_key_env(self, monkeypatch):
        monkeypatch.setenv("OSINT_TEST_MK", "correct horse battery staple")

    def _vault(self, tmp_path) -> SecretVault:
        return SecretVault(tmp_path / "vault.bin", master_key_env="OSINT_TEST_MK")

    def test_round_trip(self, tmp_path):
        v = self._vault(tmp_path)
        v.put("twitter-bearer", b"s3cret-token")
        assert v.get("twitter-bearer") == b"s3cret-token"

    def test_versions_never_overwrite(self, tmp_path):
        v = self._vault(tmp_path)
        assert v.put("k", b"one") == 1
        assert v.put("k", b"two") == 2
        assert v.get("k") == b"two"
        assert v.get("k", version=1) == b"one"
        assert v.get("k", version=2) == b"two"

    def test_unknown_name(self, tmp_path):
        with pytest.raises(SecretNotFoundError):
            self._vault(tmp_path).get("nope")

    def test_missing_master_key_message_names_env(self, tmp_path, monkeypatch):
        monkeypatch.delenv("OSINT_TEST_MK")
        v = self._vault(tmp_path)
        with pytest.raises(MissingMasterKeyError) as exc:
            v.put("k", b"x")
        assert "OSINT_TEST_MK" in str(exc.value)

    def test_wrong_master_key_fails_decryption(self, tmp_path, monkeypatch):
        v = self._vault(tmp_path)
        v.put("k", b"x")
        monkeypatch.setenv("OSINT_TEST_MK", "some other key")
        with pytest.raises(VaultIntegrityError):
            v.get("k")

    def test_file_has_magic_and_no_plaintext(self, tmp_path):
        v = self._vault(tmp_path)
        v.put("k", b"super-unique-secret-bytes")
        blob = (tmp_path / "vault.bin").read_bytes()
        assert blob.startswith(VAULT_MAGIC)
        assert b"super-unique-secret-bytes" not in blob
        assert b"super-unique-secret-bytes".hex().encode() not in blob

    def test_get_or_create_is_stable(self, tmp_path):
        v = self._vault(tmp_path)
        first = v.get_or_create("store-master-key")
        assert v.get_or_create("store-master-key") == first
        assert len(first) == 32

    def test_atomic_write_leaves_no_partial_file(self, tmp_path):
        v = self._vault(tmp_path)
        v.put("k", b"x")
        assert not (tmp_path / "vault.tmp").exists()
