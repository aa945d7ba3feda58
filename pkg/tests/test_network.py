"""End-to-end simulations of the shipped scenarios in both modes."""

import json
from functools import lru_cache

import pytest

from src import network
from src.config import SCENARIO_DIR
from src.network import Mode, interpolate
from src.scenario import parse_scenario, scale_load


@lru_cache(maxsize=None)
def simulate(name: str, mode: str = "proposed", load: float | None = None, seed: int | None = None):
    scenario = parse_scenario(SCENARIO_DIR / f"{name}.json")
    if load is not None:
        scenario = scale_load(scenario, load)
    return network.run(scenario, mode, seed)


def series_mbps(report, slice_id: str, first_bin: int, last_bin: int) -> float:
    bins = report.slices[slice_id]["series_mbps"][first_bin:last_bin]
    return sum(bins) / len(bins)


class TestInterpolate:
    """Tests for waypoint interpolation."""

    def test_clamped_before_and_after(self):
        """Test that positions hold outside the waypoint range."""
        waypoints = ((100, 0.0, 0.0), (200, 10.0, 0.0))

        assert interpolate(waypoints, 0) == (0.0, 0.0)
        assert interpolate(waypoints, 500) == (10.0, 0.0)

    def test_linear_between(self):
        """Test the midpoint of a segment."""
        waypoints = ((0, 0.0, 0.0), (100, 10.0, 20.0))

        assert interpolate(waypoints, 50) == pytest.approx((5.0, 10.0))


class TestAttach:
    """Tests for the UE attach path."""

    @pytest.mark.parametrize("mode", [m.value for m in Mode])
    def test_minimal_reaches_session(self, mode):
        """Test that a single UE attaches and its traffic reaches the DN."""
        report = simulate("minimal", mode)

        assert report.ues["0"]["reached_session"] is True
        assert report.ues["0"]["final_state"] == "SESSION_ACTIVE"
        assert report.ues["0"]["flow_adds"] >= 1
        assert report.flow(0, "up")["received_packets"] > 0
        assert report.control_rtt_us["samples"] > 0

    def test_wrong_key_never_gets_a_session(self):
        """Test that a UE failing authentication gets no rules and no user-plane bytes."""
        report = simulate("auth_gate")

        assert report.ues["0"]["reached_session"] is True
        rejected = report.ues["1"]
        assert rejected["final_state"] == "IDLE"
        assert rejected["reached_session"] is False
        assert rejected["flow_adds"] == 0
        assert rejected["n3_bytes"] == 0
        assert rejected["anchors"] == []


class TestPlaneSeparation:
    """Tests for control and user plane separation per mode."""

    def test_proposed_keeps_planes_apart(self):
        """Test that CMI carries no data and N3 carries no CMI."""
        report = simulate("minimal", "proposed")

        assert report.links["cmi"]["DATA"]["bytes"] == 0
        assert report.links["n3"]["CMI"]["bytes"] == 0
        assert report.links["n3"]["DATA"]["bytes"] > 0
        assert report.controller_data_bytes == 0

    def test_splitmac_relays_data_through_controller(self):
        """Test that split-MAC shares one link and hauls data through the controller."""
        report = simulate("minimal", "splitmac")

        assert "cmi" not in report.links
        assert "n3" not in report.links
        assert report.links["ac"]["DATA"]["bytes"] > 0
        assert report.links["ac"]["CMI"]["bytes"] > 0
        assert report.controller_data_bytes > 0


class TestDeterminism:
    """Tests for reproducible runs."""

    @pytest.mark.parametrize("mode", [m.value for m in Mode])
    def test_same_seed_same_digest(self, mode):
        """Test that two runs with one seed produce identical digests and reports."""
        scenario = parse_scenario(SCENARIO_DIR / "minimal.json")

        first = network.run(scenario, mode, 17)
        second = network.run(scenario, mode, 17)

        assert first.digest == second.digest
        assert first.to_dict() == second.to_dict()

    def test_trace_file_header(self, tmp_path):
        """Test that a traced run writes a replayable header."""
        scenario = parse_scenario(SCENARIO_DIR / "minimal.json")
        trace = tmp_path / "trace.jsonl"

        report = network.run(scenario, "proposed", trace_path=trace)

        header = json.loads(trace.read_text().splitlines()[0])
        assert header["digest"] == report.digest
        assert header["mode"] == "proposed"
        assert header["seed"] == scenario.seed

    @pytest.mark.parametrize("name", ["minimal", "handover"])
    def test_invariants_hold_every_event(self, name):
        """Test that runtime invariant checks never fire on the shipped scenarios."""
        scenario = parse_scenario(SCENARIO_DIR / f"{name}.json")

        report = network.run(scenario, "proposed", check_invariants=True)

        assert report.trace_events > 0


class TestLatency:
    """Tests for control latency against user-plane load."""

    def test_splitmac_degrades_under_load(self):
        """Test that shared-link control latency at overload is several times its idle value."""
        idle = simulate("latency", "splitmac", 0.0).control_rtt_us["mean"]
        heavy = simulate("latency", "splitmac", 1.2).control_rtt_us["mean"]

        assert heavy >= 5 * idle

    def test_proposed_is_flat(self):
        """Test that separated control latency stays within 10% of its idle value."""
        idle = simulate("latency", "proposed", 0.0).control_rtt_us["mean"]

        for load in (0.5, 1.2):
            assert simulate("latency", "proposed", load).control_rtt_us["mean"] == pytest.approx(idle, rel=0.1)

    def test_splitmac_non_decreasing(self):
        """Test that shared-link control latency does not fall as load rises."""
        means = [simulate("latency", "splitmac", load).control_rtt_us["mean"] for load in (0.0, 0.5, 0.9, 1.2)]

        for lower, higher in zip(means, means[1:]):
            assert higher >= lower * 0.98


class TestHandover:
    """Tests for controller-driven mobility."""

    def test_single_lossless_handover(self):
        """Test that a walking UE hands over once without losing or reordering packets."""
        report = simulate("handover")

        assert report.handover_count == 1
        down = report.flow(0, "down")
        assert down["received_packets"] > 0
        assert down["gaps"] == 0
        assert down["out_of_order"] == 0
        assert len(report.ues["0"]["anchors"]) == 1
        assert report.counters["wae"].get("handover_buffer_overflow", 0) == 0
        assert report.ues["0"]["final_state"] == "SESSION_ACTIVE"


class TestLoadBalancing:
    """Tests for least-loaded association steering."""

    def test_spread_with_app(self):
        """Test that co-located UEs end up spread evenly over the APs."""
        report = simulate("load_balancing")
        loads = [ap["load"] for ap in report.aps.values()]

        assert max(loads) - min(loads) <= 1

    def test_pileup_without_app(self):
        """Test that without the app the lowest-index AP takes almost everyone."""
        report = simulate("load_balancing_control")

        assert report.aps["0"]["load"] >= 15


class TestChannels:
    """Tests for conflict-minimizing channel assignment in the loop."""

    def test_co_channel_triangle_resolved(self):
        """Test that three mutually audible APs on one channel are separated."""
        report = simulate("channel")

        assert report.channel_conflicts[0] == [0, 3]
        assert report.channel_conflicts[-1][1] == 0
        assert sorted(ap["channel"] for ap in report.aps.values()) == [1, 6, 11]


class TestSlices:
    """Tests for weighted slice scheduling and slice deletion."""

    def test_weighted_share(self):
        """Test that a weight-2 slice gets twice the throughput of a weight-1 slice."""
        report = simulate("slices")

        high = series_mbps(report, "high", 5, 22)
        low = series_mbps(report, "low", 5, 22)

        assert high / low == pytest.approx(2.0, rel=0.1)

    def test_forced_delete_frees_capacity(self):
        """Test that after deleting the low slice the high slice takes the link."""
        report = simulate("slices")

        before = series_mbps(report, "high", 5, 22)
        after = series_mbps(report, "high", 24, 30)

        assert after > before
        assert 25.0 <= after <= 31.0
        assert sum(report.slices["low"]["series_mbps"][24:30]) == 0
        assert report.directive_failures == []
