"""Tests for the WAE/AP data plane."""

import pytest

from src.cmi import CmiMessage, MsgType
from src.config import N3_HEADER_BYTES
from src.data_plane import (
    NO_ASSOCIATION,
    UNMATCHED,
    Ap,
    ApEvent,
    ApEventKind,
    ApplyConfig,
    Disassociate,
    FlowTable,
    ForwardKind,
    ProbeResponse,
    SecureAssociation,
    Suppressed,
    UnknownRule,
    UnknownUe,
    Wae,
    wae_classify_and_forward,
)
from src.domain import (
    ApState,
    Direction,
    FlowMatch,
    FlowRule,
    MgmtPolicy,
    QosProfile,
    ap_id,
    ue_id,
    wae_id,
)
from src.engine import Packet, PacketClass
from src.fivegc import N2Message, UpfSession


def rule(rule_id, ue=0, direction=Direction.UP, output="N3:5", buffer=False, slice_id="default"):
    return FlowRule(rule_id, FlowMatch(ue, "default", direction), output, QosProfile(), slice_id, buffer)


def data(ue=0, direction=Direction.UP, size=1500, seq=1):
    return Packet(PacketClass.DATA, ue_id(ue), wae_id(), size, 0, seq_no=seq, flow=(ue, "default"), direction=direction)


def flow_add(correlation, **payload):
    base = {"rule_id": 1, "ue": 0, "rate_mbps": 5.0, "priority": 1, "out": "N3:5"}
    return CmiMessage(MsgType.FLOW_ADD, correlation, {**base, **payload})


class Ports:
    """Records everything a WAE emits."""

    def __init__(self):
        self.now = 0
        self.timers = []
        self.cmi = []
        self.ap = []
        self.n2 = []
        self.n3 = []
        self.stats = {"aps": [{"ap": 0, "channel": 1, "load": 1}], "ues": []}

    def wae(self, aps=2, **kwargs):
        return Wae(
            0,
            [ap_id(i) for i in range(aps)],
            now=lambda: self.now,
            schedule=lambda delay, fn: self.timers.append((self.now + delay, fn)),
            cmi_out=self.cmi.append,
            to_ap=lambda ap, pkt: self.ap.append((ap, pkt)),
            to_n2=self.n2.append,
            to_n3=lambda pkt, r: self.n3.append((pkt, r)),
            stats_source=lambda: self.stats,
            **kwargs,
        )

    def run_timers(self):
        while self.timers:
            self.timers.sort(key=lambda t: t[0])
            when, fn = self.timers.pop(0)
            self.now = when
            fn()

    def last(self):
        return self.cmi[-1]


@pytest.fixture
def ports():
    return Ports()


@pytest.fixture
def wae(ports):
    wae = ports.wae()
    wae.handle_cmi(CmiMessage(MsgType.HELLO, 0, {"controller_id": 0}))
    return wae


def attach(wae, ports, ue=0, ap=0, tunnel=5):
    """Associate a UE and hand the WAE its N2 session accept."""
    wae.handle_ap_event(ApEvent(ApEventKind.ASSOCIATED, ap_id(ap), ue_id(ue)))
    session = UpfSession(ue_id(ue), tunnel, QosProfile())
    wae.receive_n2(N2Message(ue_id(ue), b"accept", session))


class TestFlowTable:
    """Tests for the flow table."""

    def test_add_is_idempotent(self):
        """Test that re-adding the identical rule reports no change."""
        table = FlowTable()

        assert table.add(rule(1)) is True
        assert table.add(rule(1)) is False
        assert len(table) == 1

    def test_same_match_displaces(self):
        """Test that a new rule for the same match replaces the old one."""
        table = FlowTable()
        table.add(rule(1))
        table.add(rule(2, output="N3:9"))

        assert table.rule_ids() == [2]
        assert table.lookup(0, "default", Direction.UP).output == "N3:9"
        assert table.consistent()

    def test_remove_unknown(self):
        """Test that removing a missing rule raises."""
        with pytest.raises(UnknownRule):
            FlowTable().remove(3)

    def test_modify(self):
        """Test in-place rule modification."""
        table = FlowTable()
        table.add(rule(1, direction=Direction.DOWN, output="AP:0"))

        table.modify(1, output="AP:1", buffer=True)

        assert table.lookup(0, "default", Direction.DOWN).output == "AP:1"
        assert table.rules[1].buffer is True


class TestClassify:
    """Tests for packet classification and forwarding decisions."""

    def table(self):
        table = FlowTable()
        table.add(rule(1))
        table.add(rule(2, direction=Direction.DOWN, output="AP:1"))
        return table

    def test_control_classes(self):
        """Test that NAS, CMI and MGMT never touch the flow table."""
        nas = Packet(PacketClass.NAS, ue_id(0), wae_id(), 100, 0)
        cmi = Packet(PacketClass.CMI, wae_id(), wae_id(), 100, 0)
        mgmt = Packet(PacketClass.MGMT, ap_id(0), wae_id(), 100, 0)

        assert wae_classify_and_forward(nas, FlowTable(), {}).kind is ForwardKind.TO_N2
        assert wae_classify_and_forward(cmi, FlowTable(), {}).kind is ForwardKind.TO_CMI
        assert wae_classify_and_forward(mgmt, FlowTable(), {}).kind is ForwardKind.LOCAL

    def test_uplink_needs_association(self):
        """Test that uplink data without a secure association is dropped."""
        decision = wae_classify_and_forward(data(), self.table(), {})

        assert decision.kind is ForwardKind.DROP
        assert decision.reason == NO_ASSOCIATION

    def test_uplink_to_n3(self):
        """Test uplink encapsulation onto the rule's tunnel."""
        associations = {ue_id(0): SecureAssociation(ue_id(0), established=True)}

        decision = wae_classify_and_forward(data(size=1500), self.table(), associations)

        assert decision.kind is ForwardKind.TO_N3
        assert decision.port == 5
        assert decision.packet.size_bytes == 1500 + N3_HEADER_BYTES
        assert decision.packet.tunnel_id == 5
        assert decision.packet.slice_id == "default"

    def test_uplink_unmatched(self):
        """Test that data with no rule is dropped as unmatched."""
        associations = {ue_id(3): SecureAssociation(ue_id(3), established=True)}

        decision = wae_classify_and_forward(data(ue=3), self.table(), associations)

        assert decision.reason == UNMATCHED

    def test_downlink_to_ap(self):
        """Test downlink decapsulation to the serving AP port."""
        decision = wae_classify_and_forward(data(direction=Direction.DOWN, size=1536), self.table(), {})

        assert decision.kind is ForwardKind.TO_AP
        assert decision.port == 1
        assert decision.packet.size_bytes == 1500
        assert decision.packet.ipsec is True

    def test_downlink_buffered_during_handover(self):
        """Test that a UE in handover has its downlink buffered."""
        decision = wae_classify_and_forward(
            data(direction=Direction.DOWN, size=1536), self.table(), {}, frozenset({ue_id(0)})
        )

        assert decision.kind is ForwardKind.BUFFER


class TestAp:
    """Tests for the access point state machine."""

    def test_probe_response(self):
        """Test that an open AP answers probes with its channel."""
        ap = Ap(ApState(ap_id(0), (0.0, 0.0), channel=6))

        assert ap.handle_probe(ue_id(0)) == ProbeResponse(ap_id(0), 6)

    def test_probe_suppressed_by_load(self):
        """Test probe suppression at the load threshold."""
        ap = Ap(ApState(ap_id(0), (0.0, 0.0), mgmt_policy=MgmtPolicy(suppress_probe_above_load=1)))
        ap.handle_assoc_request(ue_id(0))

        assert isinstance(ap.handle_probe(ue_id(1)), Suppressed)
        assert ap.counters["probes_suppressed"] == 1

    def test_deny_list(self):
        """Test that deny-listed UEs get neither probe responses nor association."""
        ap = Ap(ApState(ap_id(0), (0.0, 0.0), mgmt_policy=MgmtPolicy(deny_list=frozenset({ue_id(2)}))))

        assert isinstance(ap.handle_probe(ue_id(2)), Suppressed)
        assert ap.handle_assoc_request(ue_id(2)) is False

    def test_capacity(self):
        """Test that association stops at max_associated."""
        ap = Ap(ApState(ap_id(0), (0.0, 0.0), max_associated=1))

        assert ap.handle_assoc_request(ue_id(0))
        assert not ap.handle_assoc_request(ue_id(1))
        assert ap.disassociate(ue_id(0))
        assert ap.handle_assoc_request(ue_id(1))

    def test_apply_config(self):
        """Test that an SBI config command updates the AP."""
        ap = Ap(ApState(ap_id(0), (0.0, 0.0)))

        ap.apply(ApplyConfig(1, channel=11, tx_power_dbm=10.0))

        assert ap.state.channel == 11
        assert ap.state.tx_power_dbm == 10.0


class TestWaeCmiAgent:
    """Tests for the WAE's handling of controller messages."""

    def test_non_hello_before_session(self, ports):
        """Test that the WAE answers an early message with an ERROR."""
        wae = ports.wae()

        replies = wae.handle_cmi(CmiMessage(MsgType.FLOW_DEL, 3, {"rule_id": 1}))

        assert replies[0].msg_type is MsgType.ERROR
        assert replies[0].correlation_id == 3

    def test_hello_ack(self, ports, wae):
        """Test the bootstrap reply."""
        assert ports.cmi[0].msg_type is MsgType.HELLO_ACK
        assert ports.cmi[0].payload["ap_count"] == 2

    def test_flow_add_ack(self, ports, wae):
        """Test that a valid FLOW_ADD installs and acknowledges."""
        wae.handle_cmi(flow_add(7))

        assert ports.last() == CmiMessage(MsgType.FLOW_ACK, 7, {"rule_id": 1})
        assert wae.table.rule_ids() == [1]

    @pytest.mark.parametrize(
        "payload,code",
        [
            ({"rule_id": None}, "UNKNOWN_RULE"),
            ({"slice": "ghost"}, "BAD_SLICE"),
            ({"out": "AP:9"}, "UNKNOWN_AP"),
            ({"out": "bogus"}, "UNKNOWN_RULE"),
        ],
    )
    def test_flow_add_errors(self, ports, wae, payload, code):
        """Test FLOW_ADD rejections and their error codes."""
        wae.handle_cmi(flow_add(7, **payload))

        assert ports.last().msg_type is MsgType.ERROR
        assert ports.last().payload["code"] == code
        assert len(wae.table) == 0

    def test_flow_del_is_idempotent(self, ports, wae):
        """Test that deleting a rule twice acknowledges both times."""
        wae.handle_cmi(flow_add(1))
        wae.handle_cmi(CmiMessage(MsgType.FLOW_DEL, 2, {"rule_id": 1}))
        wae.handle_cmi(CmiMessage(MsgType.FLOW_DEL, 3, {"rule_id": 1}))

        assert [m.msg_type for m in ports.cmi[-2:]] == [MsgType.FLOW_ACK, MsgType.FLOW_ACK]
        wae.handle_cmi(CmiMessage(MsgType.FLOW_DEL, 4, {"rule_id": 99}))
        assert ports.last().msg_type is MsgType.ERROR

    def test_flow_mod_zero_rate_rejected(self, ports, wae):
        """Test that FLOW_MOD with a zero rate errors and leaves the rule's QoS alone."""
        wae.handle_cmi(flow_add(1))
        wae.handle_cmi(CmiMessage(MsgType.FLOW_MOD, 2, {"rule_id": 1, "rate_mbps": 0}))

        assert ports.last().msg_type is MsgType.ERROR
        assert ports.last().payload["code"] == "UNKNOWN_RULE"
        assert wae.table.rules[1].qos.rate_mbps == 5.0

    def test_flow_mod_rate(self, ports, wae):
        """Test that FLOW_MOD changes only the fields it carries."""
        wae.handle_cmi(flow_add(1))
        wae.handle_cmi(CmiMessage(MsgType.FLOW_MOD, 2, {"rule_id": 1, "rate_mbps": 2.5}))

        assert ports.last() == CmiMessage(MsgType.FLOW_ACK, 2, {"rule_id": 1})
        assert wae.table.rules[1].qos.rate_mbps == 2.5
        assert wae.table.rules[1].qos.priority == 1

    def test_config_set_acked_after_ap_applies(self, ports, wae):
        """Test that CONFIG_ACK waits for the AP's CONFIG_APPLIED event."""
        assert wae.handle_cmi(CmiMessage(MsgType.CONFIG_SET, 11, {"ap": 1, "channel": 6})) == []
        ap, pkt = ports.ap[-1]
        assert ap == ap_id(1)
        assert pkt.payload.channel == 6

        wae.handle_ap_event(ApEvent(ApEventKind.CONFIG_APPLIED, ap_id(1), request_id=pkt.payload.request_id))

        assert ports.last() == CmiMessage(MsgType.CONFIG_ACK, 11, {"ap": 1})

    def test_config_set_unknown_ap(self, ports, wae):
        """Test CONFIG_SET for an AP the WAE does not own."""
        wae.handle_cmi(CmiMessage(MsgType.CONFIG_SET, 11, {"ap": 5}))

        assert ports.last().payload["code"] == "UNKNOWN_AP"

    def test_config_get_lists_rules(self, ports, wae):
        """Test that CONFIG_GET reports installed rule ids and slices."""
        wae.handle_cmi(flow_add(1))
        wae.handle_cmi(CmiMessage(MsgType.CONFIG_GET, 2, {}))

        assert ports.last().payload["rules"] == [1]
        assert ports.last().payload["slices"] == ["default"]
        assert ports.last().payload["aps"] == [{"ap": 0, "channel": 1, "load": 1}]

    def test_slice_delete_in_use(self, ports, wae):
        """Test that a slice with rules needs force to delete."""
        wae.handle_cmi(CmiMessage(MsgType.SLICE_CREATE, 1, {"slice_id": "s", "weight": 2, "ues": [0]}))
        wae.handle_cmi(flow_add(2, slice="s"))
        wae.handle_cmi(CmiMessage(MsgType.SLICE_DELETE, 3, {"slice_id": "s"}))
        assert ports.last().payload["code"] == "BAD_SLICE"

        wae.handle_cmi(CmiMessage(MsgType.SLICE_DELETE, 4, {"slice_id": "s", "force": True}))

        assert ports.last().msg_type is MsgType.SLICE_ACK
        assert len(wae.table) == 0
        assert not wae.scheduler.has_slice("s")

    def test_stats_subscription(self, ports, wae):
        """Test that a subscription produces periodic STATS_REPORTs."""
        wae.handle_cmi(CmiMessage(MsgType.STATS_SUBSCRIBE, 1, {"interval_us": 1000}))
        when, tick = ports.timers.pop(0)
        ports.now = when
        tick()

        report = ports.last()
        assert report.msg_type is MsgType.STATS_REPORT
        assert report.payload["time_us"] == 1000
        assert ports.timers[0][0] == 2000

    def test_probes_aggregated(self, ports, wae):
        """Test that probe sightings within the window share one report."""
        wae.handle_ap_event(ApEvent(ApEventKind.PROBE_HEARD, ap_id(0), ue_id(3), rssi_dbm=-60.0))
        wae.handle_ap_event(ApEvent(ApEventKind.PROBE_HEARD, ap_id(1), ue_id(3), rssi_dbm=-70.0))
        ports.run_timers()

        reports = [m for m in ports.cmi if m.msg_type is MsgType.STATS_REPORT]
        assert len(reports) == 1
        assert reports[0].payload["probes"] == [{"ue": 3, "rssi": {"0": -60.0, "1": -70.0}}]


class TestWaeMobility:
    """Tests for NAS relay and handover anchoring."""

    def test_session_notify_on_accept(self, ports, wae):
        """Test that an N2 accept with a session is relayed and announced."""
        attach(wae, ports)

        assert ports.ap[-1][1].pkt_class is PacketClass.NAS
        notify = ports.last()
        assert notify.msg_type is MsgType.SESSION_NOTIFY
        assert notify.payload["tunnel_id"] == 5
        assert notify.payload["ap"] == 0

    def test_nas_for_unassociated_ue(self, wae):
        """Test that NAS relay needs an AP association."""
        with pytest.raises(UnknownUe):
            wae.relay_nas(Direction.DOWN, b"x", ue_id(4))

    def test_handover_buffers_then_flushes_in_order(self, ports, wae):
        """Test that downlink packets during handover reach the new AP in order."""
        attach(wae, ports)
        wae.handle_cmi(flow_add(1, rule_id=1, direction="down", out="AP:0"))
        wae.handle_cmi(CmiMessage(MsgType.UE_STEER, 2, {"ue": 0, "from_ap": 0, "to_ap": 1}))
        assert isinstance(ports.ap[-1][1].payload, Disassociate)

        for seq in range(1, 4):
            assert wae.forward(data(direction=Direction.DOWN, size=1536, seq=seq)).kind is ForwardKind.BUFFER
        ports.ap.clear()
        wae.handle_ap_event(ApEvent(ApEventKind.DISASSOCIATED, ap_id(0), ue_id(0)))
        wae.handle_ap_event(ApEvent(ApEventKind.ASSOCIATED, ap_id(1), ue_id(0)))

        assert [(ap, pkt.seq_no) for ap, pkt in ports.ap] == [(ap_id(1), 1), (ap_id(1), 2), (ap_id(1), 3)]
        assert wae.table.rules[1].output == "AP:1"
        assert wae.table.rules[1].buffer is False
        assert ports.last().msg_type is MsgType.SESSION_NOTIFY
        assert ports.last().payload["ap"] == 1

    def test_handover_buffer_overflow_drops_oldest(self, ports):
        """Test that the buffer cap evicts the oldest packet."""
        wae = ports.wae(buffer_cap=2)
        wae.handle_cmi(CmiMessage(MsgType.HELLO, 0, {}))
        attach(wae, ports)
        wae.handle_cmi(flow_add(1, direction="down", out="AP:0"))
        wae.handle_cmi(CmiMessage(MsgType.UE_STEER, 2, {"ue": 0, "from_ap": 0, "to_ap": 1}))
        for seq in range(1, 4):
            wae.forward(data(direction=Direction.DOWN, size=1536, seq=seq))

        released = wae.handover_buffer_flush(ue_id(0), ap_id(1))

        assert [pkt.seq_no for pkt in released] == [2, 3]
        assert wae.counters["handover_buffer_overflow"] == 1

    def test_steer_without_session(self, ports, wae):
        """Test that a handover steer for an unknown UE is refused."""
        wae.handle_cmi(CmiMessage(MsgType.UE_STEER, 2, {"ue": 4, "from_ap": 0, "to_ap": 1}))

        assert ports.last().payload["code"] == "UNKNOWN_UE"

    def test_association_steer_denies_other_aps(self, ports, wae):
        """Test that steering an arriving UE deny-lists it everywhere but the target."""
        wae.handle_cmi(CmiMessage(MsgType.UE_STEER, 2, {"ue": 4, "to_ap": 1}))

        denies = [(ap, pkt.payload) for ap, pkt in ports.ap]
        assert [(ap, p.ue, p.deny) for ap, p in denies] == [(ap_id(0), ue_id(4), True)]

        wae.handle_ap_event(ApEvent(ApEventKind.ASSOCIATED, ap_id(1), ue_id(4)))
        assert ports.ap[-1][1].payload.deny is False
