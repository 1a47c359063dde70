"""
Integration tests for the command line.
Runs main() end to end into temporary output directories.
"""
import hashlib
import json
import logging
from unittest.mock import Mock

import pytest

from src.config import settings
from src.main import main
from src.services.database import RunLedger


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


MARTINGALE = ["verify", "--experiment", "martingale", "--model", "wright-fisher", "--analytic",
              "--grid", "201", "--n", "10", "--replicates", "40", "--t-grid", "0.5", "--seed", "3"]


class TestSubcommands:

    def test_models(self, tmp_path):
        assert main(["models", "--out", str(tmp_path)]) == 0
        models = read_json(tmp_path / "models.json")
        assert [model["name"] for model in models] == ["wright-fisher", "super-bm", "dirichlet-box"]
        assert (tmp_path / "manifest.json").exists()

    def test_spectral_wright_fisher(self, tmp_path):
        assert main(["spectral", "--model", "wright-fisher", "--gamma", "2", "--grid", "201",
                     "--out", str(tmp_path)]) == 0
        spectral = read_json(tmp_path / "spectral.json")
        assert spectral["lambda_c"] == pytest.approx(1.0, abs=2e-2)
        assert spectral["criticality"] == "product-critical"
        lines = (tmp_path / "ground_state.csv").read_text().splitlines()
        assert lines[0] == "x,phi,phi_tilde"
        assert len(lines) == 202

    def test_csv_rows_end_in_crlf(self, tmp_path):
        main(MARTINGALE + ["--out", str(tmp_path)])
        data = (tmp_path / "martingale.csv").read_bytes()
        assert data.startswith(b"t,")
        assert data.endswith(b"\r\n")
        assert data.count(b"\n") == data.count(b"\r\n")

    def test_transform_with_analytic_ground_state(self, tmp_path):
        assert main(["transform", "--model", "wright-fisher", "--analytic", "--grid", "201",
                     "--out", str(tmp_path)]) == 0
        report = read_json(tmp_path / "transform.json")
        assert report["pass"] is True
        assert report["max_abs_beta"] <= report["tolerance"]

    def test_moments(self, tmp_path):
        assert main(["moments", "--model", "wright-fisher", "--analytic", "--grid", "101", "--t-grid", "0.5", "1",
                     "--out", str(tmp_path)]) == 0
        header = (tmp_path / "moments.csv").read_text().splitlines()[0]
        assert header == "t,mean,variance_formula,variance_bound"
        assert read_json(tmp_path / "moments.json")["lambda_c"] == 1.0

    def test_simulate(self, tmp_path):
        assert main(["simulate", "--model", "super-bm", "--beta", "0", "--n", "10", "--replicates", "3",
                     "--horizon", "0.2", "--grid", "101", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "snapshots.csv").read_text().splitlines()
        assert lines[0].startswith("replicate,t,mass,particles")
        assert len(lines) == 1 + 3

    def test_verify_writes_verdict(self, tmp_path):
        code = main(MARTINGALE + ["--out", str(tmp_path)])
        verdict = read_json(tmp_path / "verdict.json")
        assert code == (0 if verdict["pass"] else 2)
        assert verdict["experiment"] == "martingale"
        assert (tmp_path / "martingale.csv").exists()


class TestExitCodes:

    def test_regime_refusal(self, tmp_path):
        assert main(["verify", "--experiment", "lln", "--model", "super-bm", "--grid", "101",
                     "--out", str(tmp_path)]) == 3

    def test_growing_unweighted_mass_fails_the_verdict(self, tmp_path):
        config = tmp_path / "run.json"
        config.write_text(json.dumps({
            "model_name": "super-bm",
            "parameters": {"beta": 0.5},
            "simulation": {"n": 20, "replicates": 300, "seed": 3},
            "experiment": {"experiment": "martingale", "weight": "none", "t_grid": [0.5, 1.0]},
        }))
        assert main(["verify", "--config", str(config), "--grid", "201", "--out", str(tmp_path / "out")]) == 2
        verdict = read_json(tmp_path / "out" / "verdict.json")
        assert verdict["pass"] is False
        assert verdict["metrics"]["max_abs_z"] > 3.0

    def test_unknown_model(self, tmp_path):
        assert main(["spectral", "--model", "catalytic", "--out", str(tmp_path)]) == 64

    def test_unknown_subcommand(self, tmp_path):
        assert main(["explode", "--out", str(tmp_path)]) == 64

    def test_unreadable_config(self, tmp_path):
        assert main(["spectral", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 64

    def test_invalid_config(self, tmp_path):
        config = tmp_path / "run.json"
        config.write_text(json.dumps({"model_name": "wright-fisher", "simulation": {"n": 0}}))
        assert main(["spectral", "--config", str(config), "--out", str(tmp_path / "out")]) == 64

    def test_malformed_param(self, tmp_path):
        assert main(["models", "--param", "gamma", "--out", str(tmp_path)]) == 64


class TestReproducibility:

    def test_same_seed_same_bytes(self, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        main(MARTINGALE + ["--out", str(first)])
        main(MARTINGALE + ["--out", str(second)])
        for name in ("martingale.csv", "verdict.json", "manifest.json"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_manifest_checksums(self, tmp_path):
        main(MARTINGALE + ["--out", str(tmp_path)])
        manifest = read_json(tmp_path / "manifest.json")
        assert manifest["master_seed"] == 3
        assert set(manifest["outputs"]) == {"martingale.csv", "verdict.json"}
        for name, digest in manifest["outputs"].items():
            assert hashlib.sha256((tmp_path / name).read_bytes()).hexdigest() == digest

    def test_runs_are_recorded(self, tmp_path, monkeypatch):
        url = f"sqlite:///{tmp_path / 'ledger.db'}"
        monkeypatch.setattr("src.main.RunLedger", lambda: RunLedger(url))
        main(["models", "--out", str(tmp_path / "out")])
        rows = RunLedger(url).recent()
        assert rows[0]["subcommand"] == "models"
        assert rows[0]["exit_code"] == 0


class TestStartup:

    def test_unreachable_cache_is_reported(self, tmp_path, monkeypatch, caplog):
        cache = Mock()
        cache.health_check.return_value = False
        monkeypatch.setattr("src.main.cache_service", cache)
        monkeypatch.setattr(settings, "cache_enabled", True)
        with caplog.at_level(logging.WARNING):
            assert main(["models", "--out", str(tmp_path)]) == 0
        cache.health_check.assert_called_once()
        assert "Redis is unreachable" in caplog.text
