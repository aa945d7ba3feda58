"""Tests for traffic generators."""

import numpy as np
import pytest

from src.domain import Direction
from src.traffic import BadSpec, TrafficKind, TrafficSpec, gen_traffic, interval_us


class TestCbr:
    """Tests for constant bit rate arrivals."""

    def test_interval(self):
        """Test the exact inter-arrival time."""
        assert interval_us(TrafficSpec(rate_mbps=12.0, pkt_bytes=1500)) == 1000

    def test_arrivals_within_horizon(self):
        """Test arrival times from start to the horizon."""
        spec = TrafficSpec(rate_mbps=12.0, pkt_bytes=1500, start_us=500)

        assert list(gen_traffic(spec, horizon_us=5500)) == [1500, 2500, 3500, 4500, 5500]

    def test_stop_before_horizon(self):
        """Test that stop_us ends the flow early."""
        spec = TrafficSpec(rate_mbps=12.0, pkt_bytes=1500, stop_us=3000)

        assert list(gen_traffic(spec, horizon_us=10_000)) == [1000, 2000, 3000]

    def test_packet_count_matches_rate(self):
        """Test that a non-integer interval does not drift over one second."""
        spec = TrafficSpec(rate_mbps=1.2, pkt_bytes=1000)

        assert len(list(gen_traffic(spec, horizon_us=1_000_000))) == 150

    def test_needs_stop_or_horizon(self):
        """Test that an unbounded flow is refused."""
        with pytest.raises(BadSpec):
            gen_traffic(TrafficSpec())


class TestOnOff:
    """Tests for exponential on/off arrivals."""

    def spec(self):
        return TrafficSpec(TrafficKind.ONOFF, rate_mbps=8.0, pkt_bytes=1000, mean_on_us=100_000, mean_off_us=100_000)

    def test_same_seed_same_arrivals(self):
        """Test determinism under a fixed seed."""
        a = list(gen_traffic(self.spec(), np.random.default_rng(3), 2_000_000))
        b = list(gen_traffic(self.spec(), np.random.default_rng(3), 2_000_000))

        assert a == b
        assert a == sorted(a)

    def test_long_run_average(self):
        """Test that the average rate approaches peak x on fraction."""
        spec = self.spec()
        horizon = 100_000_000

        count = sum(1 for _ in gen_traffic(spec, np.random.default_rng(42), horizon))
        rate_mbps = count * spec.pkt_bytes * 8 / horizon

        assert spec.mean_rate_mbps == 4.0
        assert rate_mbps == pytest.approx(4.0, rel=0.15)

    def test_requires_rng(self):
        """Test that ONOFF refuses to run unseeded."""
        with pytest.raises(BadSpec):
            gen_traffic(self.spec(), horizon_us=1000)


class TestSpecValidation:
    """Tests for traffic spec validation and scaling."""

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"rate_mbps": 0},
            {"rate_mbps": float("inf")},
            {"pkt_bytes": 63},
            {"pkt_bytes": 1501},
            {"start_us": -1},
            {"start_us": 10, "stop_us": 5},
            {"kind": TrafficKind.ONOFF, "mean_on_us": 0},
        ],
    )
    def test_invalid_specs(self, kwargs):
        """Test each rejected spec field."""
        with pytest.raises(BadSpec):
            gen_traffic(TrafficSpec(**kwargs), np.random.default_rng(0), 1000)

    def test_scaled(self):
        """Test load scaling keeps every field but the rate."""
        spec = TrafficSpec(rate_mbps=10.0, direction=Direction.DOWN, traffic_class="video")

        scaled = spec.scaled(0.5)

        assert scaled.rate_mbps == 5.0
        assert scaled.direction is Direction.DOWN
        assert scaled.traffic_class == "video"
        assert spec.scaled(0) is None
