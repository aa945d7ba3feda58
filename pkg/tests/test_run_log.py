"""Tests for the run history log."""

import json

import pytest

from src import run_log
from src.metrics import MetricsReport, rtt_summary


def report(scenario="latency", mode="PROPOSED", rtts=(100, 300), handovers=0):
    return MetricsReport(
        scenario=scenario,
        mode=mode,
        seed=1,
        duration_us=1_000_000,
        digest="abcd",
        trace_events=50,
        control_rtt_us=rtt_summary(list(rtts)),
        handover_count=handovers,
    )


@pytest.fixture
def log_file(tmp_path, monkeypatch):
    path = tmp_path / "logs" / "runs.jsonl"
    monkeypatch.setattr(run_log, "RUNS_LOG_FILE", path)
    return path


class TestLogRun:
    """Tests for appending run entries."""

    def test_creates_directory_and_appends(self, log_file):
        """Test that entries land one per line in a fresh directory."""
        run_log.log_run(report(), "run", wall_seconds=1.23456)
        run_log.log_run(report(mode="SPLITMAC"), "sweep", load=0.5)

        lines = log_file.read_text().splitlines()
        assert len(lines) == 2
        first = json.loads(lines[0])
        assert first["rtt_mean_us"] == 200.0
        assert first["wall_seconds"] == 1.235
        assert json.loads(lines[1])["load"] == 0.5

    def test_entry_fields(self, log_file):
        """Test the recorded fields."""
        entry = run_log.log_run(report(handovers=2))

        assert entry["command"] == "run"
        assert entry["handovers"] == 2
        assert entry["events"] == 50
        assert entry["digest"] == "abcd"


class TestSummary:
    """Tests for summarizing the history."""

    def test_empty_history(self, log_file):
        """Test the summary with no log file."""
        assert run_log.get_run_summary() == {"runs": 0, "modes": {}}

    def test_per_mode_means(self, log_file):
        """Test per-mode aggregation and the scenario filter."""
        run_log.log_run(report(rtts=(100,)))
        run_log.log_run(report(rtts=(300,), handovers=1))
        run_log.log_run(report(mode="SPLITMAC", rtts=()))
        run_log.log_run(report(scenario="other"))

        summary = run_log.get_run_summary("latency")

        assert summary["runs"] == 3
        assert summary["modes"]["PROPOSED"] == {"runs": 2, "mean_rtt_us": 200.0, "handovers": 1}
        assert summary["modes"]["SPLITMAC"]["mean_rtt_us"] is None

    def test_by_scenario(self, log_file):
        """Test run counts per scenario."""
        run_log.log_run(report())
        run_log.log_run(report())
        run_log.log_run(report(scenario="handover"))

        assert run_log.get_runs_by_scenario() == {"latency": 2, "handover": 1}

    def test_clear(self, log_file):
        """Test that clearing removes the history."""
        run_log.log_run(report())
        run_log.clear_logs()

        assert not log_file.exists()
        run_log.clear_logs()

    def test_print_report(self, log_file, capsys):
        """Test the console report."""
        run_log.log_run(report())
        run_log.print_run_report()

        out = capsys.readouterr().out
        assert "RUN HISTORY" in out
        assert "PROPOSED: 1 run(s)" in out
        assert "latency: 1" in out
