"""Tests for the discrete-event core."""

import json

import pytest

from src.domain import ap_id, wae_id
from src.engine import (
    Link,
    LinkPair,
    Packet,
    PacketClass,
    SimulationError,
    Simulator,
    Stream,
    make_rng,
)


def packet(size=1000, pkt_class=PacketClass.DATA, seq=0, ipsec=False):
    return Packet(pkt_class, ap_id(0), wae_id(), size, 0, seq_no=seq, ipsec=ipsec)


class TestSimulator:
    """Tests for scheduling and the trace digest."""

    def test_equal_times_run_in_schedule_order(self):
        """Test FIFO order among events at the same instant."""
        sim = Simulator()
        order = []
        for name in "abc":
            sim.schedule(10, order.append, name)
        sim.run(100)

        assert order == ["a", "b", "c"]

    def test_at_and_now(self):
        """Test absolute scheduling and the integer clock."""
        sim = Simulator()
        seen = []
        sim.at(250, lambda: seen.append(sim.now))
        sim.run(1000)

        assert seen == [250]

    def test_negative_delay_rejected(self):
        """Test that events cannot be scheduled in the past."""
        with pytest.raises(SimulationError):
            Simulator().schedule(-1, print)

    def test_digest_is_deterministic(self):
        """Test that identical traces give identical digests and different ones do not."""
        def digest(detail):
            sim = Simulator()
            sim.schedule(5, sim.trace, "node", "kind", detail)
            sim.run(10)
            return sim.digest

        assert digest("x") == digest("x")
        assert digest("x") != digest("y")

    def test_checks_run_after_each_event(self):
        """Test that registered checks fire after every event."""
        sim = Simulator()
        calls = []
        sim.checks.append(lambda: calls.append(sim.now))
        sim.schedule(1, lambda: None)
        sim.schedule(2, lambda: None)
        sim.run(10)

        assert calls == [1, 2]

    def test_dump_trace(self, tmp_path):
        """Test the trace file layout: header then one line per event."""
        sim = Simulator(keep_trace=True)
        sim.schedule(3, sim.trace, "ap0", "probe", "ue1")
        sim.run(10)
        path = tmp_path / "trace.jsonl"

        sim.dump_trace(path, {"mode": "PROPOSED"})

        lines = path.read_text().splitlines()
        assert json.loads(lines[0]) == {"mode": "PROPOSED", "digest": sim.digest}
        assert json.loads(lines[1]) == {"time_us": 3, "node": "ap0", "event_kind": "probe", "detail": "ue1"}


class TestRng:
    """Tests for seeded PRNG streams."""

    def test_streams_reproducible_and_independent(self):
        """Test that (seed, stream, index) fixes the sequence."""
        a = make_rng(7, Stream.TRAFFIC, 0).random(5)
        b = make_rng(7, Stream.TRAFFIC, 0).random(5)
        c = make_rng(7, Stream.TRAFFIC, 1).random(5)
        d = make_rng(7, Stream.NONCE, 0).random(5)

        assert list(a) == list(b)
        assert list(a) != list(c)
        assert list(a) != list(d)


class TestLink:
    """Tests for the link model."""

    def test_serialization_and_propagation(self):
        """Test delivery time = queueing + serialization + propagation."""
        sim = Simulator()
        link = Link(sim, "l", ap_id(0), wae_id(), capacity_mbps=8.0, prop_delay_us=100)
        arrivals = []
        link.transmit(packet(1000, seq=1), lambda p: arrivals.append((sim.now, p.seq_no)))
        link.transmit(packet(1000, seq=2), lambda p: arrivals.append((sim.now, p.seq_no)))
        sim.run(10_000)

        assert arrivals == [(1100, 1), (2100, 2)]

    def test_serialization_rounds_up(self):
        """Test that partial microseconds round up."""
        sim = Simulator()
        link = Link(sim, "l", ap_id(0), wae_id(), capacity_mbps=3.0, prop_delay_us=0)

        assert link.serialization_us(1) == 3

    def test_ipsec_overhead_counts(self):
        """Test that secured packets occupy the wire longer."""
        assert packet(1000, ipsec=True).wire_bytes > packet(1000).wire_bytes

    def test_drop_tail(self):
        """Test that a full queue drops and counts per class."""
        sim = Simulator()
        link = Link(sim, "l", ap_id(0), wae_id(), capacity_mbps=8.0, prop_delay_us=0, queue_cap=2)

        results = [link.transmit(packet(), lambda p: None) for _ in range(3)]

        assert results == [True, True, False]
        assert link.stats[PacketClass.DATA].dropped == 1

    def test_queue_drains(self):
        """Test that backlog falls as packets finish serializing."""
        sim = Simulator()
        link = Link(sim, "l", ap_id(0), wae_id(), capacity_mbps=8.0, prop_delay_us=0, queue_cap=2)
        link.transmit(packet(), lambda p: None)
        link.transmit(packet(), lambda p: None)
        sim.run(1001)

        assert link.backlog() == 1
        assert link.transmit(packet(), lambda p: None)

    def test_bad_capacity(self):
        """Test that zero capacity is rejected."""
        with pytest.raises(SimulationError):
            Link(Simulator(), "l", ap_id(0), wae_id(), capacity_mbps=0, prop_delay_us=0)

    def test_pair_summary_sums_directions(self):
        """Test per-class totals across both directions."""
        sim = Simulator()
        up = Link(sim, "up", ap_id(0), wae_id(), 8.0, 0)
        down = Link(sim, "down", wae_id(), ap_id(0), 8.0, 0)
        pair = LinkPair("p", up, down)
        up.transmit(packet(100), lambda p: None)
        down.transmit(packet(200, PacketClass.CMI), lambda p: None)
        sim.run(10_000)

        summary = pair.summary()
        assert summary["DATA"]["bytes"] == 100
        assert summary["CMI"]["bytes"] == 200
        assert pair.class_bytes(PacketClass.DATA) == 100
        assert pair.in_flight == 0
