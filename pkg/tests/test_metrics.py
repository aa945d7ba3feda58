"""Tests for flow accounting and report files."""

import csv
import json

import pytest

from src.domain import Direction, ue_id, wae_id
from src.engine import Packet, PacketClass
from src.metrics import (
    FlowStats,
    MetricsReport,
    flatten,
    rtt_summary,
    sweep_row,
    write_reports,
    write_json,
    write_table,
)


def pkt(seq, created=0, size=1000):
    return Packet(PacketClass.DATA, ue_id(0), wae_id(), size, created, seq_no=seq, flow=(0, "default"), direction=Direction.UP)


def report(**changes):
    base = dict(
        scenario="s",
        mode="PROPOSED",
        seed=1,
        duration_us=1_000_000,
        digest="00ff",
        trace_events=12,
        control_rtt_us=rtt_summary([100, 200, 300]),
        flows=[{"ue": 0, "traffic_class": "default", "direction": "up", "throughput_mbps": 1.5}],
        links={"n3": {"DATA": {"enqueued": 3, "delivered": 2, "dropped": 1, "bytes": 10}}},
    )
    base.update(changes)
    return MetricsReport(**base)


class TestFlowStats:
    """Tests for receiver-side flow accounting."""

    def test_in_order_delivery(self):
        """Test that consecutive sequence numbers leave no gaps."""
        stats = FlowStats(0, "default", Direction.UP)
        for seq in (1, 2, 3):
            stats.offered(pkt(seq))
            stats.received(pkt(seq), 500)

        assert stats.gaps == 0
        assert stats.out_of_order == 0
        assert stats.received_bytes == 3000

    def test_gap_and_reorder(self):
        """Test that skipped and late packets are counted separately."""
        stats = FlowStats(0, "default", Direction.UP)
        for seq in (1, 4, 2):
            stats.received(pkt(seq), 0)

        assert stats.gaps == 2
        assert stats.out_of_order == 1

    def test_throughput_from_first_offer(self):
        """Test that throughput is measured from the first offered packet."""
        stats = FlowStats(0, "default", Direction.UP)
        stats.offered(pkt(1, created=1000))
        stats.received(pkt(1, created=1000), 2000)

        assert stats.throughput_mbps(9000) == pytest.approx(1000 * 8 / 8000)
        assert FlowStats(1, "default", Direction.UP).throughput_mbps(9000) == 0.0

    def test_to_dict_latency(self):
        """Test the mean latency field."""
        stats = FlowStats(0, "default", Direction.DOWN)
        stats.received(pkt(1, created=0), 300)
        stats.received(pkt(2, created=0), 500)

        d = stats.to_dict(1000)
        assert d["mean_latency_us"] == 400
        assert d["direction"] == "down"


class TestRttSummary:
    """Tests for control RTT summaries."""

    def test_empty(self):
        """Test that no samples yields nulls."""
        assert rtt_summary([]) == {"samples": 0, "mean": None, "p50": None, "p95": None, "p99": None}

    def test_values(self):
        """Test mean and median."""
        summary = rtt_summary([100, 200, 300])

        assert summary["samples"] == 3
        assert summary["mean"] == 200.0
        assert summary["p50"] == 200.0
        assert 200.0 < summary["p95"] <= 300.0


class TestReportFiles:
    """Tests for report output."""

    def test_flatten(self):
        """Test dotted keys and list indices."""
        assert flatten({"a": {"b": 1}, "c": [2, {"d": 3}]}) == [("a.b", 1), ("c[0]", 2), ("c[1].d", 3)]

    def test_write_reports(self, tmp_path):
        """Test that report.json and metrics.csv are written and agree."""
        json_path, csv_path = write_reports(report(), tmp_path / "out")

        doc = json.loads(json_path.read_text())
        assert doc["digest"] == "00ff"
        with open(csv_path, newline="") as f:
            rows = {row["key"]: row["value"] for row in csv.DictReader(f)}
        assert rows["digest"] == "00ff"
        assert rows["control_rtt_us.samples"] == "3"
        assert not [p for p in (tmp_path / "out").iterdir() if p.name.startswith(".")]

    def test_failed_write_leaves_no_file(self, tmp_path):
        """Test that an error during writing leaves no partial file."""
        with pytest.raises(TypeError):
            write_json(tmp_path / "bad.json", {"x": object()})

        assert list(tmp_path.iterdir()) == []

    def test_failed_csv_commits_neither_report(self, tmp_path, mocker):
        """Test that a failure on metrics.csv leaves no report.json either."""
        mocker.patch("src.metrics.flatten", side_effect=OSError("disk full"))
        out = tmp_path / "out"

        with pytest.raises(OSError):
            write_reports(report(), out)

        assert list(out.iterdir()) == []

    def test_failed_rewrite_keeps_previous_pair(self, tmp_path, mocker):
        """Test that a failed second run leaves the first run's files untouched."""
        out = tmp_path / "out"
        json_path, csv_path = write_reports(report(digest="aaaa"), out)
        before = (json_path.read_text(), csv_path.read_text())
        mocker.patch("src.metrics.flatten", side_effect=OSError("disk full"))

        with pytest.raises(OSError):
            write_reports(report(digest="bbbb"), out)

        assert (json_path.read_text(), csv_path.read_text()) == before
        assert sorted(p.name for p in out.iterdir()) == ["metrics.csv", "report.json"]

    def test_write_table(self, tmp_path):
        """Test the column-per-key table."""
        write_table(tmp_path / "t.csv", [{"load": 0.5, "mode": "PROPOSED"}])

        assert (tmp_path / "t.csv").read_text().splitlines() == ["load,mode", "0.5,PROPOSED"]

    def test_sweep_row(self):
        """Test the sweep table row."""
        row = sweep_row(report(), 0.75)

        assert row["load"] == 0.75
        assert row["rtt_mean_us"] == 200.0
        assert row["data_drops"] == 1
        assert row["throughput_mbps"] == 1.5

    def test_flow_lookup(self):
        """Test finding a flow in a report."""
        assert report().flow(0)["throughput_mbps"] == 1.5
        assert report().flow(0, "down") is None
