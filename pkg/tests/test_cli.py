"""
Tests for the command-line interface and its exit codes
"""
import csv
import json
import sys
from pathlib import Path

import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, cli_run


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "master_seed": 3,
        "cases_per_task_type": 1,
        "repeats": 1,
        "injection_prob": 0.5,
        "policies": ["proposed", "b1"],
    }))
    return path


class TestUsage:
    """Tests for argument errors."""

    def test_no_command(self):
        """A missing subcommand is a usage error."""
        assert cli_run([]) == EXIT_USAGE

    def test_unknown_policy(self, config_path, tmp_path):
        """--policies only accepts known names."""
        code = cli_run(["run", "--config", str(config_path), "--out", str(tmp_path / "o"), "--policies", "b9"])
        assert code == EXIT_USAGE

    def test_zero_jobs(self, config_path, tmp_path):
        """--jobs must be at least 1."""
        code = cli_run(["run", "--config", str(config_path), "--out", str(tmp_path / "o"), "--jobs", "0"])
        assert code == EXIT_USAGE

    def test_bad_format(self, tmp_path):
        """--format is restricted to json, csv and pdf."""
        code = cli_run(["report", "--runs", str(tmp_path), "--format", "xml", "--out", str(tmp_path / "r")])
        assert code == EXIT_USAGE

    def test_help(self, capsys):
        """--help exits cleanly."""
        assert cli_run(["--help"]) == EXIT_OK
        assert "gridsearch" in capsys.readouterr().out


class TestValidate:
    """Tests for the validate command."""

    def test_ok(self, config_path, capsys):
        """A valid config prints OK."""
        assert cli_run(["validate", "--config", str(config_path)]) == EXIT_OK
        assert f"{config_path}: OK" in capsys.readouterr().out

    def test_missing_file(self, tmp_path, capsys):
        """A missing config is a config error."""
        assert cli_run(["validate", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
        assert "file not found" in capsys.readouterr().err

    def test_invalid_value(self, tmp_path):
        """Out-of-range values are config errors."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"theta": 1.5}))
        assert cli_run(["validate", "--config", str(path)]) == EXIT_CONFIG

    def test_missing_corpus(self, tmp_path):
        """A corpus_path that does not exist fails validation."""
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"corpus_path": str(tmp_path / "corpus.json")}))
        assert cli_run(["validate", "--config", str(path)]) == EXIT_CONFIG


class TestCommands:
    """Tests for gen-corpus, run, gridsearch and report."""

    def test_gen_corpus(self, config_path, tmp_path):
        """corpus.json lands in --out next to existing files."""
        out = tmp_path / "out"
        out.mkdir()
        (out / "keep.txt").write_text("mine")
        assert cli_run(["gen-corpus", "--config", str(config_path), "--out", str(out)]) == EXIT_OK
        corpus = json.loads((out / "corpus.json").read_text())
        assert len(corpus["tasks"]) == 3
        assert (out / "keep.txt").read_text() == "mine"

    def test_run_then_report(self, config_path, tmp_path, capsys):
        """A run directory rebuilds into a CSV report."""
        out = tmp_path / "run"
        assert cli_run(["run", "--config", str(config_path), "--out", str(out), "--jobs", "1"]) == EXIT_OK
        assert "TSR=" in capsys.readouterr().out
        assert sorted(p.name for p in (out / "runs").iterdir()) == ["b1.jsonl", "proposed.jsonl"]

        report_path = tmp_path / "report.csv"
        code = cli_run(["report", "--runs", str(out / "runs"), "--format", "csv", "--out", str(report_path)])
        assert code == EXIT_OK
        rows = list(csv.reader(report_path.open()))
        assert rows[0] == ["policy", "task_type", "metric", "value"]
        assert len(rows) == 1 + 2 * 3 * 4

    def test_report_matches_run(self, config_path, tmp_path):
        """The rebuilt JSON report equals the one written by run."""
        out = tmp_path / "run"
        assert cli_run(["run", "--config", str(config_path), "--out", str(out), "--jobs", "1"]) == EXIT_OK
        rebuilt = tmp_path / "rebuilt.json"
        assert cli_run(["report", "--runs", str(out), "--out", str(rebuilt)]) == EXIT_OK
        assert json.loads(rebuilt.read_text()) == json.loads((out / "report.json").read_text())

    def test_report_without_runs(self, tmp_path):
        """A directory with no run logs is a config error."""
        assert cli_run(["report", "--runs", str(tmp_path), "--out", str(tmp_path / "r.json")]) == EXIT_CONFIG

    def test_gridsearch(self, config_path, tmp_path, capsys):
        """The grid search reports 66 candidates at step 0.1."""
        code = cli_run(["gridsearch", "--config", str(config_path), "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert "66 candidates" in capsys.readouterr().out
        assert (tmp_path / "gridsearch.json").is_file()

    def test_gridsearch_bad_step(self, config_path, tmp_path):
        """A step that does not divide 1 is a runtime failure."""
        code = cli_run(["gridsearch", "--config", str(config_path), "--step", "0.3", "--out", str(tmp_path)])
        assert code == EXIT_RUNTIME

    def test_remote_backend_without_url(self, config_path, tmp_path, monkeypatch):
        """The remote backend needs AGENT_BACKEND_URL."""
        monkeypatch.delenv("AGENT_BACKEND_URL", raising=False)
        code = cli_run(["run", "--config", str(config_path), "--out", str(tmp_path / "o"), "--backend", "remote"])
        assert code == EXIT_CONFIG


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
