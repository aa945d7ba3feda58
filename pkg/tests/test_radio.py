"""Tests for the radio model and conflict graphs."""

import pytest

from src.domain import ApState, ap_id
from src.radio import DEFAULT_RADIO, RadioModel, build_conflict_graph, neighbors_of


class TestRadioModel:
    """Tests for log-distance path loss."""

    def test_reference_distance(self):
        """Test that loss at and inside the reference distance is PL0."""
        assert DEFAULT_RADIO.path_loss(1.0) == pytest.approx(40.0)
        assert DEFAULT_RADIO.path_loss(0.0) == pytest.approx(40.0)

    def test_ten_metres(self):
        """Test one decade of distance at exponent 3."""
        assert DEFAULT_RADIO.path_loss(10.0) == pytest.approx(70.0)
        assert DEFAULT_RADIO.rssi(20.0, (0.0, 0.0), (10.0, 0.0)) == pytest.approx(-50.0)

    def test_audible_threshold(self):
        """Test the association threshold boundary."""
        assert DEFAULT_RADIO.audible(-82.0)
        assert not DEFAULT_RADIO.audible(-82.1)

    def test_custom_exponent(self):
        """Test a free-space style exponent."""
        radio = RadioModel(exponent=2.0)

        assert radio.path_loss(100.0) == pytest.approx(80.0)


class TestConflictGraph:
    """Tests for AP conflict graph construction."""

    def test_near_aps_conflict(self):
        """Test that APs hearing each other are connected and far ones are not."""
        aps = [
            ApState(ap_id(0), (0.0, 0.0)),
            ApState(ap_id(1), (30.0, 0.0)),
            ApState(ap_id(2), (1000.0, 0.0)),
        ]

        graph = build_conflict_graph(aps)

        assert graph.has_edge(ap_id(0), ap_id(1))
        assert not graph.has_edge(ap_id(0), ap_id(2))
        assert neighbors_of(graph, ap_id(2)) == frozenset()

    def test_stronger_direction_decides(self):
        """Test that one loud AP is enough to connect a pair."""
        # 60 m: 40 + 30*log10(60) ~ 93.3 dB of loss
        aps = [
            ApState(ap_id(0), (0.0, 0.0), tx_power_dbm=20.0),
            ApState(ap_id(1), (60.0, 0.0), tx_power_dbm=5.0),
        ]

        assert build_conflict_graph(aps).has_edge(ap_id(1), ap_id(0))

    def test_unknown_ap_has_no_neighbors(self):
        """Test neighbors_of on a node outside the graph."""
        graph = build_conflict_graph([ApState(ap_id(0), (0.0, 0.0))])

        assert neighbors_of(graph, ap_id(5)) == frozenset()
