"""
Unit tests for the run ledger on a throwaway SQLite file.
"""
import pytest

from src.services.database import RunLedger


@pytest.fixture
def ledger(tmp_path):
    return RunLedger(f"sqlite:///{tmp_path / 'ledger.db'}")


class TestRunLedger:

    def test_disabled_without_url(self):
        ledger = RunLedger("")
        assert not ledger.enabled
        assert ledger.record("models", None, "abc", 0, "1.0.0", 0) is None
        assert ledger.recent() == []

    def test_record_and_read_back(self, ledger):
        first = ledger.record("verify", "martingale", "abc", 42, "1.0.0", 0, manifest="{}")
        second = ledger.record("spectral", None, "def", 2 ** 63, "1.0.0", 3)
        assert ledger.enabled
        assert second == first + 1
        rows = ledger.recent()
        assert [row["id"] for row in rows] == [second, first]
        assert rows[0]["master_seed"] == 2 ** 63
        assert rows[0]["exit_code"] == 3
        assert rows[1]["experiment"] == "martingale"

    def test_recent_limit(self, ledger):
        for seed in range(5):
            ledger.record("models", None, "abc", seed, "1.0.0", 0)
        assert len(ledger.recent(limit=2)) == 2

    def test_unreachable_database_disables(self, tmp_path):
        ledger = RunLedger(f"sqlite:///{tmp_path / 'missing' / 'dir' / 'ledger.db'}")
        assert not ledger.enabled
        assert ledger.record("models", None, "abc", 0, "1.0.0", 0) is None
