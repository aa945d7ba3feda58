"""WAE and AP data plane: flow table, forwarding, CMI agent, NAS relay, handover buffering, SBI."""

import logging
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

from .cmi import CmiMessage, CmiSession, HandshakeError, MsgType, Role, error_message
from .config import (
    CHANNELS,
    DEFAULT_SLICE,
    HANDOVER_BUFFER_PACKETS,
    IKE_MESSAGE_BYTES,
    IPSEC_OVERHEAD_BYTES,
    N3_HEADER_BYTES,
    PROBE_AGGREGATION_US,
    SBI_MESSAGE_BYTES,
)
from .domain import (
    ApState,
    Direction,
    FlowRule,
    MgmtPolicy,
    NodeId,
    QosProfile,
    SliceTemplate,
    ap_id,
    parse_output,
    ue_id,
    wae_id,
)
from .engine import Packet, PacketClass
from .fivegc import N2Message
from .scheduler import SliceScheduler

logger = logging.getLogger(__name__)

# ERROR frame codes
UNKNOWN_AP = "UNKNOWN_AP"
UNKNOWN_RULE = "UNKNOWN_RULE"
BAD_SLICE = "BAD_SLICE"
BAD_CONFIG = "BAD_CONFIG"
UNKNOWN_UE = "UNKNOWN_UE"


class DataPlaneError(Exception):
    """Base class for data-plane errors."""


class UnknownRule(DataPlaneError):
    pass


class UnknownUe(DataPlaneError):
    pass


class FlowTable:
    """Rules by id plus an index on (ue, traffic_class, direction)."""

    def __init__(self):
        self.rules: dict[int, FlowRule] = {}
        self._index: dict[tuple[int, str, Direction], int] = {}

    def __len__(self) -> int:
        return len(self.rules)

    def add(self, rule: FlowRule) -> bool:
        """Install a rule; returns False when the identical rule was already present."""
        existing = self.rules.get(rule.rule_id)
        if existing == rule:
            return False
        if existing is not None:
            self._index.pop(existing.key, None)
        displaced = self._index.get(rule.key)
        if displaced is not None and displaced != rule.rule_id:
            del self.rules[displaced]
        self.rules[rule.rule_id] = rule
        self._index[rule.key] = rule.rule_id
        return True

    def modify(self, rule_id: int, **changes) -> FlowRule:
        rule = self.rules.get(rule_id)
        if rule is None:
            raise UnknownRule(str(rule_id))
        updated = replace(rule, **changes)
        self.rules[rule_id] = updated
        return updated

    def remove(self, rule_id: int) -> FlowRule:
        rule = self.rules.pop(rule_id, None)
        if rule is None:
            raise UnknownRule(str(rule_id))
        del self._index[rule.key]
        return rule

    def lookup(self, ue: int, traffic_class: str, direction: Direction) -> FlowRule | None:
        rule_id = self._index.get((ue, traffic_class, direction))
        return None if rule_id is None else self.rules[rule_id]

    def rule_ids(self) -> list[int]:
        return sorted(self.rules)

    def consistent(self) -> bool:
        return len(self._index) == len(self.rules) and all(
            self.rules[rid].key == key for key, rid in self._index.items()
        )


@dataclass
class SecureAssociation:
    """Abstract UE-WAE IPSec tunnel: a two-message setup and a fixed per-packet overhead."""

    ue: NodeId
    established: bool = False
    overhead_bytes: int = IPSEC_OVERHEAD_BYTES


@dataclass(frozen=True)
class IkeRequest:
    ue: NodeId
    size_bytes: int = IKE_MESSAGE_BYTES


@dataclass(frozen=True)
class IkeResponse:
    ue: NodeId
    size_bytes: int = IKE_MESSAGE_BYTES


class ForwardKind(str, Enum):
    TO_N2 = "TO_N2"
    TO_CMI = "TO_CMI"
    TO_N3 = "TO_N3"
    TO_AP = "TO_AP"
    BUFFER = "BUFFER"
    DROP = "DROP"
    LOCAL = "LOCAL"


# Drop reasons
UNMATCHED = "UNMATCHED"
NO_RULE = "NO_RULE"
NO_ASSOCIATION = "NO_ASSOCIATION"


@dataclass(frozen=True)
class ForwardDecision:
    kind: ForwardKind
    packet: Packet | None = None
    port: int | None = None
    rule: FlowRule | None = None
    reason: str = ""


def wae_classify_and_forward(
    pkt: Packet,
    table: FlowTable,
    associations: dict[NodeId, SecureAssociation],
    buffering: frozenset[NodeId] | set[NodeId] = frozenset(),
) -> ForwardDecision:
    """
    Decide where a packet arriving at the WAE goes.

    NAS goes to N2, CMI to the controller session and MGMT is handled locally.
    Uplink data needs an established secure association and a matching uplink
    rule; it leaves on the rule's N3 tunnel with the N3 header added. Downlink
    data from N3 is decapsulated and sent to the serving AP port of its
    downlink rule, or buffered while the UE is handing over.
    """
    if pkt.pkt_class is PacketClass.NAS:
        return ForwardDecision(ForwardKind.TO_N2, pkt)
    if pkt.pkt_class is PacketClass.CMI:
        return ForwardDecision(ForwardKind.TO_CMI, pkt)
    if pkt.pkt_class is PacketClass.MGMT:
        return ForwardDecision(ForwardKind.LOCAL, pkt)

    ue, traffic_class = pkt.flow
    if pkt.direction is Direction.UP:
        association = associations.get(ue_id(ue))
        if association is None or not association.established:
            return ForwardDecision(ForwardKind.DROP, pkt, reason=NO_ASSOCIATION)
        rule = table.lookup(ue, traffic_class, Direction.UP)
        if rule is None:
            return ForwardDecision(ForwardKind.DROP, pkt, reason=UNMATCHED)
        kind, tunnel_id = parse_output(rule.output)
        if kind != "N3":
            return ForwardDecision(ForwardKind.DROP, pkt, rule=rule, reason=NO_RULE)
        out = replace(pkt, size_bytes=pkt.size_bytes + N3_HEADER_BYTES, ipsec=False, tunnel_id=tunnel_id, slice_id=rule.slice_id)
        return ForwardDecision(ForwardKind.TO_N3, out, tunnel_id, rule)

    rule = table.lookup(ue, traffic_class, Direction.DOWN)
    if rule is None:
        return ForwardDecision(ForwardKind.DROP, pkt, reason=UNMATCHED)
    kind, ap_index = parse_output(rule.output)
    if kind != "AP":
        return ForwardDecision(ForwardKind.DROP, pkt, rule=rule, reason=NO_RULE)
    out = replace(pkt, size_bytes=pkt.size_bytes - N3_HEADER_BYTES, ipsec=True, tunnel_id=None, slice_id=rule.slice_id)
    if rule.buffer or ue_id(ue) in buffering:
        return ForwardDecision(ForwardKind.BUFFER, out, ap_index, rule)
    return ForwardDecision(ForwardKind.TO_AP, out, ap_index, rule)


# -- SBI: typed commands and events between the WAE and its APs ---------------


@dataclass(frozen=True)
class ApplyConfig:
    request_id: int
    channel: int | None = None
    tx_power_dbm: float | None = None
    policy: MgmtPolicy | None = None


@dataclass(frozen=True)
class Disassociate:
    ue: NodeId
    target_hint: NodeId | None = None


@dataclass(frozen=True)
class SteerDeny:
    ue: NodeId
    deny: bool


class ApEventKind(str, Enum):
    PROBE_HEARD = "PROBE_HEARD"
    ASSOCIATED = "ASSOCIATED"
    DISASSOCIATED = "DISASSOCIATED"
    ASSOC_DENIED = "ASSOC_DENIED"
    CONFIG_APPLIED = "CONFIG_APPLIED"


@dataclass(frozen=True)
class ApEvent:
    kind: ApEventKind
    ap: NodeId
    ue: NodeId | None = None
    rssi_dbm: float | None = None
    request_id: int | None = None


@dataclass(frozen=True)
class ProbeResponse:
    ap: NodeId
    channel: int


@dataclass(frozen=True)
class Suppressed:
    ap: NodeId
    reason: str


def ap_handle_probe(ue: NodeId, ap_state: ApState, extra_deny: frozenset[NodeId] = frozenset()) -> ProbeResponse | Suppressed:
    policy = ap_state.mgmt_policy
    if ue in policy.deny_list or ue in extra_deny:
        return Suppressed(ap_state.ap, "deny_list")
    if policy.suppress_probe_above_load is not None and ap_state.load >= policy.suppress_probe_above_load:
        return Suppressed(ap_state.ap, "load")
    return ProbeResponse(ap_state.ap, ap_state.channel)


class Ap:
    """Access point state machine applying SBI commands."""

    def __init__(self, state: ApState):
        self.state = state
        self.steer_deny: set[NodeId] = set()
        self.counters: Counter[str] = Counter()

    @property
    def ap(self) -> NodeId:
        return self.state.ap

    def handle_probe(self, ue: NodeId) -> ProbeResponse | Suppressed:
        result = ap_handle_probe(ue, self.state, frozenset(self.steer_deny))
        self.counters["probe_responses" if isinstance(result, ProbeResponse) else "probes_suppressed"] += 1
        return result

    def handle_assoc_request(self, ue: NodeId) -> bool:
        """Associate the UE unless it is deny-listed or the AP is full."""
        if ue in self.state.associated:
            return True
        if ue in self.state.mgmt_policy.deny_list or ue in self.steer_deny:
            self.counters["assoc_denied"] += 1
            return False
        if self.state.load >= self.state.max_associated:
            self.counters["assoc_denied"] += 1
            return False
        self.state = replace(self.state, associated=self.state.associated | {ue})
        return True

    def disassociate(self, ue: NodeId) -> bool:
        if ue not in self.state.associated:
            return False
        self.state = replace(self.state, associated=self.state.associated - {ue})
        return True

    def apply(self, command: ApplyConfig) -> None:
        changes = {}
        if command.channel is not None:
            changes["channel"] = command.channel
        if command.tx_power_dbm is not None:
            changes["tx_power_dbm"] = command.tx_power_dbm
        if command.policy is not None:
            changes["mgmt_policy"] = command.policy
        if changes:
            self.state = replace(self.state, **changes)

    def set_steer_deny(self, command: SteerDeny) -> None:
        if command.deny:
            self.steer_deny.add(command.ue)
        else:
            self.steer_deny.discard(command.ue)


@dataclass
class UeSession:
    ue: NodeId
    tunnel_id: int
    qos: QosProfile
    traffic_class: str = "default"


@dataclass
class HandoverState:
    target: NodeId | None
    buffer: deque = field(default_factory=deque)
    dropped: int = 0


class Wae:
    """
    WLAN aggregation entity: CMI agent, flow-table forwarding, NAS relay and mobility anchor.

    The WAE is transport-agnostic: it talks to its surroundings through the
    port callables handed in by the topology.
    """

    def __init__(
        self,
        index: int,
        aps: list[NodeId],
        *,
        now: Callable[[], int],
        schedule: Callable[[int, Callable[[], None]], None],
        cmi_out: Callable[[CmiMessage], None],
        to_ap: Callable[[NodeId, Packet], None],
        to_n2: Callable[[N2Message], None],
        to_n3: Callable[[Packet, FlowRule], None],
        stats_source: Callable[[], dict] | None = None,
        buffer_cap: int = HANDOVER_BUFFER_PACKETS,
    ):
        self.node = wae_id(index)
        self.aps = list(aps)
        self._now = now
        self._schedule = schedule
        self._cmi_out = cmi_out
        self._to_ap = to_ap
        self._to_n2 = to_n2
        self._to_n3 = to_n3
        self.stats_source = stats_source
        self.buffer_cap = buffer_cap

        self.session = CmiSession(Role.WAE, index, len(self.aps))
        self.table = FlowTable()
        self.slices: dict[str, SliceTemplate] = {DEFAULT_SLICE: SliceTemplate(DEFAULT_SLICE)}
        self.scheduler = SliceScheduler()
        self.scheduler.configure_slice(self.slices[DEFAULT_SLICE])
        self.associations: dict[NodeId, SecureAssociation] = {}
        self.ue_ap: dict[NodeId, NodeId] = {}
        self.ue_sessions: dict[NodeId, UeSession] = {}
        self.handovers: dict[NodeId, HandoverState] = {}
        self.steering: dict[NodeId, NodeId] = {}
        self.counters: Counter[str] = Counter()

        self._deleted_rules: set[int] = set()
        self._pending_config: dict[int, tuple[int, NodeId]] = {}
        self._next_request = 1
        self._stats_interval: int | None = None
        self._probe_buffer: dict[NodeId, dict[NodeId, float]] = {}
        self._probe_flush_armed = False

    # -- CMI agent --------------------------------------------------------

    def send_cmi(self, msg: CmiMessage) -> None:
        self._cmi_out(msg)

    def handle_cmi(self, msg: CmiMessage) -> list[CmiMessage]:
        """
        Process one controller message. Replies are sent through `cmi_out`
        and also returned; replies deferred on an AP (CONFIG_ACK) are not.
        """
        if not self.session.established:
            try:
                replies = self.session.handle(msg)
            except HandshakeError as exc:
                self.counters["handshake_errors"] += 1
                replies = [error_message(msg.correlation_id, "HANDSHAKE", str(exc))]
            for reply in replies:
                self.send_cmi(reply)
            if self.session.established:
                for session in self.ue_sessions.values():
                    if session.ue in self.ue_ap:
                        self._notify_session(session, self.ue_ap[session.ue])
            return replies

        handler = {
            MsgType.FLOW_ADD: self._flow_add,
            MsgType.FLOW_MOD: self._flow_mod,
            MsgType.FLOW_DEL: self._flow_del,
            MsgType.CONFIG_SET: self._config_set,
            MsgType.CHANNEL_SET: self._config_set,
            MsgType.MGMT_POLICY_SET: self._config_set,
            MsgType.CONFIG_GET: self._config_get,
            MsgType.SLICE_CREATE: self._slice_write,
            MsgType.SLICE_UPDATE: self._slice_write,
            MsgType.SLICE_READ: self._slice_read,
            MsgType.SLICE_DELETE: self._slice_delete,
            MsgType.UE_STEER: self._ue_steer,
            MsgType.STATS_SUBSCRIBE: self._stats_subscribe,
        }.get(msg.msg_type)
        if handler is None:
            self.counters["unexpected_messages"] += 1
            return []
        replies = [r for r in handler(msg) if r is not None]
        for reply in replies:
            self.send_cmi(reply)
        return replies

    def _error(self, msg: CmiMessage, code: str, detail: str) -> CmiMessage:
        self.counters[f"error_{code}"] += 1
        return error_message(msg.correlation_id, code, detail)

    def _check_output(self, output: str) -> str | None:
        try:
            kind, number = parse_output(output)
        except ValueError:
            return UNKNOWN_RULE
        if kind == "AP" and ap_id(number) not in self.aps:
            return UNKNOWN_AP
        return None

    def _flow_add(self, msg: CmiMessage) -> list[CmiMessage]:
        payload = msg.payload
        if payload.get("rule_id") is None:
            return [self._error(msg, UNKNOWN_RULE, "FLOW_ADD without rule_id")]
        try:
            rule = FlowRule.from_payload(payload)
        except ValueError as exc:
            return [self._error(msg, UNKNOWN_RULE, str(exc))]
        if rule.slice_id not in self.slices:
            return [self._error(msg, BAD_SLICE, f"unknown slice {rule.slice_id}")]
        code = self._check_output(rule.output)
        if code:
            return [self._error(msg, code, f"bad output {rule.output}")]
        if self.table.add(rule):
            self._deleted_rules.discard(rule.rule_id)
            self.counters["flow_adds"] += 1
        return [CmiMessage(MsgType.FLOW_ACK, msg.correlation_id, {"rule_id": rule.rule_id})]

    def _flow_mod(self, msg: CmiMessage) -> list[CmiMessage]:
        payload = msg.payload
        rule_id = payload["rule_id"]
        rule = self.table.rules.get(rule_id)
        if rule is None:
            return [self._error(msg, UNKNOWN_RULE, f"no rule {rule_id}")]
        changes = {}
        if payload.get("out") is not None:
            code = self._check_output(payload["out"])
            if code:
                return [self._error(msg, code, f"bad output {payload['out']}")]
            changes["output"] = payload["out"]
        if payload.get("rate_mbps") is not None or payload.get("priority") is not None:
            try:
                changes["qos"] = replace(
                    rule.qos,
                    rate_mbps=rule.qos.rate_mbps if payload.get("rate_mbps") is None else payload["rate_mbps"],
                    priority=rule.qos.priority if payload.get("priority") is None else payload["priority"],
                )
            except ValueError as exc:
                return [self._error(msg, UNKNOWN_RULE, str(exc))]
        if payload.get("buffer") is not None:
            changes["buffer"] = payload["buffer"]
        self.table.modify(rule_id, **changes)
        return [CmiMessage(MsgType.FLOW_ACK, msg.correlation_id, {"rule_id": rule_id})]

    def _flow_del(self, msg: CmiMessage) -> list[CmiMessage]:
        rule_id = msg.payload["rule_id"]
        try:
            rule = self.table.remove(rule_id)
        except UnknownRule:
            if rule_id not in self._deleted_rules:
                return [self._error(msg, UNKNOWN_RULE, f"no rule {rule_id}")]
        else:
            self._deleted_rules.add(rule_id)
            self.counters["flow_delete_discards"] += self.scheduler.remove_flow(rule.key)
        return [CmiMessage(MsgType.FLOW_ACK, msg.correlation_id, {"rule_id": rule_id})]

    def _config_set(self, msg: CmiMessage) -> list[CmiMessage]:
        payload = msg.payload
        ap = ap_id(payload["ap"]) if payload["ap"] >= 0 else None
        if ap not in self.aps:
            return [self._error(msg, UNKNOWN_AP, f"no AP {payload['ap']}")]
        channel = payload.get("channel")
        if channel is not None and channel not in CHANNELS:
            return [self._error(msg, BAD_CONFIG, f"channel {channel} not in {CHANNELS}")]
        policy = None
        try:
            if msg.msg_type is MsgType.MGMT_POLICY_SET:
                policy = MgmtPolicy.from_payload(payload)
            elif payload.get("mgmt_policy") is not None:
                policy = MgmtPolicy.from_payload(payload["mgmt_policy"])
        except (TypeError, ValueError) as exc:
            return [self._error(msg, BAD_CONFIG, str(exc))]

        request_id = self._next_request
        self._next_request += 1
        self._pending_config[request_id] = (msg.correlation_id, ap)
        command = ApplyConfig(request_id, channel, payload.get("tx_power_dbm"), policy)
        self._send_sbi(ap, command)
        return []

    def _config_get(self, msg: CmiMessage) -> list[CmiMessage]:
        aps = []
        if self.stats_source is not None:
            aps = [{"ap": a["ap"], "channel": a["channel"], "load": a["load"]} for a in self.stats_source().get("aps", [])]
        payload = {"rules": self.table.rule_ids(), "slices": sorted(self.slices), "aps": aps}
        return [CmiMessage(MsgType.CONFIG_ACK, msg.correlation_id, payload)]

    def _slice_write(self, msg: CmiMessage) -> list[CmiMessage]:
        try:
            template = SliceTemplate.from_payload(msg.payload)
        except (TypeError, ValueError) as exc:
            return [self._error(msg, BAD_SLICE, str(exc))]
        existing = self.slices.get(template.slice_id)
        if msg.msg_type is MsgType.SLICE_CREATE and existing is not None and existing != template:
            return [self._error(msg, BAD_SLICE, f"slice {template.slice_id} exists")]
        if msg.msg_type is MsgType.SLICE_UPDATE and existing is None:
            return [self._error(msg, BAD_SLICE, f"no slice {template.slice_id}")]
        for other in self.slices.values():
            if other.slice_id != template.slice_id and template.filter.overlaps(other.filter):
                return [self._error(msg, BAD_SLICE, f"filter overlaps {other.slice_id}")]
        self.slices[template.slice_id] = template
        self.scheduler.configure_slice(template)
        return [
            CmiMessage(
                MsgType.SLICE_ACK,
                msg.correlation_id,
                {"slice_id": template.slice_id, "template": template.to_payload()},
            )
        ]

    def _slice_read(self, msg: CmiMessage) -> list[CmiMessage]:
        template = self.slices.get(msg.payload["slice_id"])
        if template is None:
            return [self._error(msg, BAD_SLICE, f"no slice {msg.payload['slice_id']}")]
        return [
            CmiMessage(
                MsgType.SLICE_ACK,
                msg.correlation_id,
                {"slice_id": template.slice_id, "template": template.to_payload()},
            )
        ]

    def _slice_delete(self, msg: CmiMessage) -> list[CmiMessage]:
        slice_id = msg.payload["slice_id"]
        if slice_id == DEFAULT_SLICE:
            return [self._error(msg, BAD_SLICE, "default slice is permanent")]
        ack = CmiMessage(MsgType.SLICE_ACK, msg.correlation_id, {"slice_id": slice_id, "deleted": True})
        if slice_id not in self.slices:
            return [ack]
        referencing = [r for r in self.table.rules.values() if r.slice_id == slice_id]
        if referencing and not msg.payload.get("force"):
            return [self._error(msg, BAD_SLICE, f"slice {slice_id} in use")]
        for rule in referencing:
            self.table.remove(rule.rule_id)
            self._deleted_rules.add(rule.rule_id)
        del self.slices[slice_id]
        discarded = self.scheduler.remove_slice(slice_id)
        self.counters["slice_delete_discards"] += discarded
        return [ack]

    def _stats_subscribe(self, msg: CmiMessage) -> list[CmiMessage]:
        interval = msg.payload["interval_us"]
        if interval <= 0:
            return [self._error(msg, BAD_CONFIG, "interval_us must be positive")]
        first = self._stats_interval is None
        self._stats_interval = interval
        if first:
            self._schedule(interval, self._stats_tick)
        return []

    def _stats_tick(self) -> None:
        if self.stats_source is not None:
            report = {"time_us": self._now(), **self.stats_source()}
            self.send_cmi(CmiMessage(MsgType.STATS_REPORT, 0, report))
        self._schedule(self._stats_interval, self._stats_tick)

    def _ue_steer(self, msg: CmiMessage) -> list[CmiMessage]:
        payload = msg.payload
        ue = ue_id(payload["ue"])
        target = ap_id(payload["to_ap"])
        if target not in self.aps:
            return [self._error(msg, UNKNOWN_AP, f"no AP {payload['to_ap']}")]

        if payload.get("from_ap") is None:
            self.steering[ue] = target
            for ap in self.aps:
                if ap != target:
                    self._send_sbi(ap, SteerDeny(ue, True))
            return []

        source = ap_id(payload["from_ap"])
        if source not in self.aps:
            return [self._error(msg, UNKNOWN_AP, f"no AP {payload['from_ap']}")]
        if ue not in self.ue_sessions or self.ue_ap.get(ue) != source:
            return [self._error(msg, UNKNOWN_UE, f"{ue} has no session on {source}")]
        self.handovers[ue] = HandoverState(target)
        self._send_sbi(source, Disassociate(ue, target))
        return []

    # -- SBI ----------------------------------------------------------------

    def _send_sbi(self, ap: NodeId, command) -> None:
        pkt = Packet(PacketClass.MGMT, self.node, ap, SBI_MESSAGE_BYTES, self._now(), payload=command)
        self._to_ap(ap, pkt)

    def handle_ap_event(self, event: ApEvent) -> None:
        if event.kind is ApEventKind.CONFIG_APPLIED:
            pending = self._pending_config.pop(event.request_id, None)
            if pending is not None:
                correlation_id, ap = pending
                self.send_cmi(CmiMessage(MsgType.CONFIG_ACK, correlation_id, {"ap": ap.index}))
        elif event.kind is ApEventKind.PROBE_HEARD:
            self._probe_buffer.setdefault(event.ue, {})[event.ap] = event.rssi_dbm
            if not self._probe_flush_armed:
                self._probe_flush_armed = True
                self._schedule(PROBE_AGGREGATION_US, self._flush_probes)
        elif event.kind is ApEventKind.ASSOCIATED:
            self._on_associated(event.ue, event.ap)
        elif event.kind is ApEventKind.DISASSOCIATED:
            if self.ue_ap.get(event.ue) == event.ap:
                del self.ue_ap[event.ue]
        elif event.kind is ApEventKind.ASSOC_DENIED:
            self.counters["assoc_denied"] += 1

    def _flush_probes(self) -> None:
        self._probe_flush_armed = False
        if not self._probe_buffer or not self.session.established:
            self._probe_buffer.clear()
            return
        probes = [
            {"ue": ue.index, "rssi": {str(ap.index): dbm for ap, dbm in sorted(heard.items())}}
            for ue, heard in sorted(self._probe_buffer.items())
        ]
        self._probe_buffer.clear()
        self.send_cmi(CmiMessage(MsgType.STATS_REPORT, 0, {"time_us": self._now(), "probes": probes}))

    def _on_associated(self, ue: NodeId, ap: NodeId) -> None:
        self.ue_ap[ue] = ap
        target = self.steering.pop(ue, None)
        if target is not None:
            for other in self.aps:
                if other != target:
                    self._send_sbi(other, SteerDeny(ue, False))
        if ue in self.handovers:
            self.handover_buffer_flush(ue, ap)

    def handover_buffer_flush(self, ue: NodeId, new_ap: NodeId) -> list[Packet]:
        """
        Complete a handover: release buffered downlink packets to the new AP in
        arrival order, clear buffering on the UE's rules and notify the controller.
        """
        state = self.handovers.pop(ue, None)
        released = list(state.buffer) if state else []
        for pkt in released:
            self._to_ap(new_ap, pkt)
        for rule in list(self.table.rules.values()):
            if rule.match.ue == ue.index and rule.match.direction is Direction.DOWN:
                self.table.modify(rule.rule_id, output=f"AP:{new_ap.index}", buffer=False)
        session = self.ue_sessions.get(ue)
        if session is not None:
            self._notify_session(session, new_ap)
        return released

    def _buffer(self, ue: NodeId, pkt: Packet) -> None:
        state = self.handovers.get(ue)
        if state is None:
            state = self.handovers.setdefault(ue, HandoverState(None))
        state.buffer.append(pkt)
        if len(state.buffer) > self.buffer_cap:
            state.buffer.popleft()
            state.dropped += 1
            self.counters["handover_buffer_overflow"] += 1

    # -- data path ----------------------------------------------------------

    def receive_from_ap(self, ap: NodeId, pkt: Packet) -> None:
        if pkt.pkt_class is PacketClass.MGMT:
            self._handle_mgmt(ap, pkt)
            return
        if pkt.pkt_class is PacketClass.NAS:
            try:
                self.relay_nas(Direction.UP, pkt.payload, pkt.src)
            except UnknownUe:
                self.counters["nas_unknown_ue"] += 1
            return
        self.forward(pkt)

    def _handle_mgmt(self, ap: NodeId, pkt: Packet) -> None:
        payload = pkt.payload
        if isinstance(payload, ApEvent):
            self.handle_ap_event(payload)
        elif isinstance(payload, IkeRequest):
            self.associations[payload.ue] = SecureAssociation(payload.ue, established=True)
            reply = Packet(PacketClass.MGMT, self.node, payload.ue, payload.size_bytes, self._now(), payload=IkeResponse(payload.ue))
            self._to_ap(ap, reply)

    def forward(self, pkt: Packet) -> ForwardDecision:
        decision = wae_classify_and_forward(pkt, self.table, self.associations, self.handovers.keys())
        if decision.kind is ForwardKind.DROP:
            self.counters[decision.reason] += 1
        elif decision.kind is ForwardKind.TO_N3:
            self._to_n3(decision.packet, decision.rule)
        elif decision.kind is ForwardKind.TO_AP:
            self._to_ap(ap_id(decision.port), decision.packet)
        elif decision.kind is ForwardKind.BUFFER:
            self._buffer(ue_id(pkt.flow[0]), decision.packet)
        return decision

    def relay_nas(self, direction: Direction, nas: bytes, ue: NodeId) -> N2Message | Packet:
        """
        Relay NAS bytes verbatim between a UE's AP path and N2.

        Raises:
            UnknownUe: No AP association for the UE.
        """
        ap = self.ue_ap.get(ue)
        if ap is None:
            raise UnknownUe(str(ue))
        if direction is Direction.UP:
            message = N2Message(ue, nas)
            self._to_n2(message)
            return message
        pkt = Packet(PacketClass.NAS, self.node, ue, len(nas), self._now(), payload=nas)
        self._to_ap(ap, pkt)
        return pkt

    def receive_n2(self, message: N2Message) -> None:
        """Downlink N2 from the AMF; an accept carrying a session is announced to the controller."""
        try:
            self.relay_nas(Direction.DOWN, message.nas, message.ue)
        except UnknownUe:
            self.counters["nas_unknown_ue"] += 1
            return
        if message.session is not None:
            session = UeSession(message.ue, message.session.tunnel_id, message.session.qos, message.traffic_class)
            self.ue_sessions[message.ue] = session
            self._notify_session(session, self.ue_ap[message.ue])

    def _notify_session(self, session: UeSession, ap: NodeId) -> None:
        if not self.session.established:
            return
        self.send_cmi(
            CmiMessage(
                MsgType.SESSION_NOTIFY,
                0,
                {
                    "ue": session.ue.index,
                    "tunnel_id": session.tunnel_id,
                    "rate_mbps": session.qos.rate_mbps,
                    "priority": session.qos.priority,
                    "latency_budget_us": session.qos.latency_budget_us,
                    "ap": ap.index,
                    "traffic_class": session.traffic_class,
                },
            )
        )

