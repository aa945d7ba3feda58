"""Scenario wiring: builds nodes and links for a mode, drives UEs and runs the simulation.

Both modes share every node implementation. They differ only in topology:

- PROPOSED: CMI has its own WAE-controller link, N3 runs WAE -> UPF through
  the WAE's slice scheduler.
- SPLITMAC: CMI and N3 share the WAE-controller link and the controller
  relays user-plane traffic to the UPF. There is no slice scheduler.
"""

import logging
from collections import Counter, deque
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator

from .apps import build_app, count_conflicts
from .cmi import CmiMessage, DecodeError, StreamDecoder, encode_frame
from .config import (
    ASSOC_FRAME_BYTES,
    ASSOC_THRESHOLD_DBM,
    AUDIT_INTERVAL_US,
    CHECK_INVARIANTS,
    HANDOVER_BUFFER_PACKETS,
    MOBILITY_TICK_US,
    PROBE_REQUEST_BYTES,
    PROBE_RESPONSE_BYTES,
    RESCAN_BACKOFF_US,
    SCAN_WINDOW_US,
    SERIES_BIN_US,
    STATS_INTERVAL_US,
    WIRELESS_PROP_DELAY_US,
)
from .controller import ControllerError, CrudOp, RanController
from .data_plane import (
    Ap,
    ApEvent,
    ApEventKind,
    ApplyConfig,
    Disassociate,
    IkeRequest,
    IkeResponse,
    ProbeResponse,
    SteerDeny,
    Wae,
)
from .domain import (
    SERVING_STATES,
    ApState,
    Direction,
    FlowRule,
    MgmtPolicy,
    NodeId,
    NodeKind,
    SliceTemplate,
    Trigger,
    UeContext,
    UeState,
    ap_id,
    ue_id,
    ue_transition,
    wae_id,
)
from .engine import InvariantViolation, Link, LinkPair, Packet, PacketClass, Simulator, Stream
from .fivegc import (
    Amf,
    N2Message,
    NasType,
    Subscriber,
    UnknownTunnel,
    Upf,
    auth_response,
    decode_nas,
    encode_nas,
    sessions_without_authentication,
)
from .metrics import FlowStats, MetricsReport, build_report
from .radio import DEFAULT_RADIO, RadioModel, build_conflict_graph, neighbors_of
from .scenario import Scenario, UeSpec, scenario_to_dict
from .traffic import TrafficSpec, gen_traffic

logger = logging.getLogger(__name__)

CONTROLLER_NODE = NodeId(NodeKind.CONTROLLER, 0)
AMF_NODE = NodeId(NodeKind.AMF, 0)
UPF_NODE = NodeId(NodeKind.UPF, 0)
DN_NODE = NodeId(NodeKind.DN, 0)


class Mode(str, Enum):
    PROPOSED = "proposed"
    SPLITMAC = "splitmac"


# -- 802.11 management frames between UEs and APs ----------------------------


@dataclass(frozen=True)
class ProbeRequest:
    ue: NodeId


@dataclass(frozen=True)
class AssocRequest:
    ue: NodeId
    reassociation: bool = False


@dataclass(frozen=True)
class AssocResponse:
    ap: NodeId
    accepted: bool


@dataclass(frozen=True)
class DisassocFrame:
    ap: NodeId
    target_hint: NodeId | None = None


@dataclass(frozen=True)
class LeaveNotice:
    ue: NodeId


def interpolate(waypoints: tuple[tuple[int, float, float], ...], time_us: int) -> tuple[float, float]:
    """Piecewise-linear position along (time_us, x, y) waypoints, clamped at both ends."""
    if time_us <= waypoints[0][0]:
        return waypoints[0][1], waypoints[0][2]
    for (t0, x0, y0), (t1, x1, y1) in zip(waypoints, waypoints[1:]):
        if time_us <= t1:
            f = (time_us - t0) / (t1 - t0) if t1 > t0 else 1.0
            return x0 + f * (x1 - x0), y0 + f * (y1 - y0)
    return waypoints[-1][1], waypoints[-1][2]


class UeAgent:
    """
    A station: scans, associates, registers over NAS, sets up IPSec and sources traffic.

    All state changes go through `ue_transition`, so an illegal sequence
    raises instead of silently diverging.
    """

    def __init__(self, net: "Network", spec: UeSpec, key: bytes):
        self.net = net
        self.spec = spec
        self.node = ue_id(spec.ue)
        self.ctx = UeContext(self.node, key)
        self.reached_session = False
        self.gave_up = False
        self.anchors: set[tuple[NodeId, int]] = set()
        self.held: deque[Packet] = deque()
        self.counters: Counter[str] = Counter()
        self._responses: dict[NodeId, float] = {}
        self._handover_target: NodeId | None = None
        self._pending_tunnel: int | None = None
        self._seq: Counter[tuple[int, str]] = Counter()

    def position(self) -> tuple[float, float]:
        tick = self.net.sim.now // MOBILITY_TICK_US * MOBILITY_TICK_US
        return interpolate(self.spec.waypoints, tick)

    def _transition(self, trigger: Trigger, **kwargs) -> None:
        self.ctx = ue_transition(self.ctx, trigger, **kwargs)
        self.net.sim.trace(self.node, "ue_state", f"{trigger.value}->{self.ctx.state.value}")
        if self.ctx.tunnel_id is not None:
            self.anchors.add((self.ctx.anchor_wae, self.ctx.tunnel_id))

    def _mgmt(self, ap: NodeId, frame, size: int) -> None:
        pkt = Packet(PacketClass.MGMT, self.node, ap, size, self.net.sim.now, payload=frame)
        self.net.air_up(ap, pkt)

    # -- attach --------------------------------------------------------

    def scan(self) -> None:
        if self.gave_up or self.ctx.state not in (UeState.IDLE, UeState.SCANNING):
            return
        self._transition(Trigger.PROBE_SENT)
        self._responses = {}
        self.counters["scans"] += 1
        for ap in self.net.audible_aps(self):
            self._mgmt(ap, ProbeRequest(self.node), PROBE_REQUEST_BYTES)
        self.net.sim.schedule(SCAN_WINDOW_US, self._scan_done)

    def _scan_done(self) -> None:
        if self.ctx.state is not UeState.SCANNING:
            return
        if not self._responses:
            self.net.sim.schedule(RESCAN_BACKOFF_US, self.scan)
            return
        best = min(self._responses, key=lambda ap: (-self._responses[ap], ap.index))
        self._mgmt(best, AssocRequest(self.node), ASSOC_FRAME_BYTES)

    def _on_assoc_response(self, frame: AssocResponse) -> None:
        if self.ctx.state is UeState.SCANNING:
            if not frame.accepted:
                self.counters["assoc_denied"] += 1
                self.net.sim.schedule(RESCAN_BACKOFF_US, self.scan)
                return
            self._transition(Trigger.ASSOC_OK)
            self._transition(Trigger.AUTH_START, ap=frame.ap, wae=self.net.wae.node)
            self._send_nas(encode_nas(NasType.REGISTRATION_REQUEST, self.node))
        elif self.ctx.state is UeState.HANDOVER and frame.ap == self._handover_target:
            if not frame.accepted:
                self.counters["reassoc_denied"] += 1
                self.net.sim.schedule(RESCAN_BACKOFF_US, self._reassociate)
                return
            self._transition(Trigger.HO_DONE, ap=frame.ap)
            self._handover_target = None
            while self.held:
                self.net.air_up(frame.ap, self.held.popleft())

    def _send_nas(self, nas: bytes) -> None:
        pkt = Packet(PacketClass.NAS, self.node, self.ctx.serving_ap, len(nas), self.net.sim.now, payload=nas)
        self.net.air_up(self.ctx.serving_ap, pkt)

    def _on_nas(self, nas: bytes) -> None:
        message = decode_nas(nas)
        nas_type = NasType(message["type"])
        if self.ctx.state is not UeState.AUTHENTICATING:
            self.counters["late_nas"] += 1
            return
        if nas_type is NasType.AUTH_CHALLENGE:
            res = auth_response(self.ctx.auth_key, bytes.fromhex(message["nonce"]))
            self._send_nas(encode_nas(NasType.AUTH_RESPONSE, self.node, res=res.hex()))
        elif nas_type is NasType.REGISTRATION_ACCEPT:
            self._pending_tunnel = message["tunnel_id"]
            serving = self.ctx.serving_ap
            self._transition(Trigger.AUTH_OK)
            request = IkeRequest(self.node)
            self._mgmt(serving, request, request.size_bytes)
        elif nas_type is NasType.REGISTRATION_REJECT:
            serving = self.ctx.serving_ap
            self._transition(Trigger.AUTH_FAIL)
            self.gave_up = True
            logger.info("%s registration rejected: %s", self.node, message.get("cause"))
            self._mgmt(serving, LeaveNotice(self.node), ASSOC_FRAME_BYTES)

    def _on_ike_response(self) -> None:
        if self.ctx.state is not UeState.REGISTERED:
            return
        subscriber = self.net.scenario.subscriber(self.spec.ue)
        self._transition(Trigger.SESSION_OK, tunnel_id=self._pending_tunnel, qos=subscriber.qos if subscriber else None)
        if not self.reached_session:
            self.reached_session = True
            self._start_traffic()

    # -- handover ------------------------------------------------------

    def _on_disassoc(self, frame: DisassocFrame) -> None:
        if self.ctx.state is not UeState.SESSION_ACTIVE or frame.ap != self.ctx.serving_ap:
            return
        self._transition(Trigger.STEER)
        target = frame.target_hint
        if target is None:
            heard = self.net.audible_aps(self)
            others = [ap for ap in heard if ap != frame.ap] or heard
            if not others:
                self.counters["stranded"] += 1
                return
            target = max(others, key=lambda ap: (self.net.rssi(ap, self), -ap.index))
        self._handover_target = target
        self._reassociate()

    def _reassociate(self) -> None:
        if self.ctx.state is UeState.HANDOVER and self._handover_target is not None:
            self._mgmt(self._handover_target, AssocRequest(self.node, reassociation=True), ASSOC_FRAME_BYTES)

    # -- traffic -------------------------------------------------------

    def _start_traffic(self) -> None:
        for index, spec in enumerate(self.spec.traffic):
            spec = replace(spec, start_us=max(spec.start_us, self.net.sim.now))
            rng = self.net.sim.rng(Stream.TRAFFIC, self.spec.ue * 64 + index)
            arrivals = gen_traffic(spec, rng, horizon_us=self.net.scenario.duration_us)
            if spec.direction is Direction.UP:
                self.net.drive(arrivals, lambda spec=spec: self._send_data(spec))
            else:
                self.net.drive(arrivals, lambda spec=spec: self.net.downlink_arrival(self.node, spec))

    def _send_data(self, spec: TrafficSpec) -> None:
        flow = (self.spec.ue, spec.traffic_class)
        self._seq[flow] += 1
        pkt = Packet(
            PacketClass.DATA,
            self.node,
            DN_NODE,
            spec.pkt_bytes,
            self.net.sim.now,
            seq_no=self._seq[flow],
            flow=flow,
            direction=Direction.UP,
            ipsec=True,
        )
        self.net.flow(flow, Direction.UP).offered(pkt)
        if self.ctx.state is UeState.SESSION_ACTIVE:
            self.net.air_up(self.ctx.serving_ap, pkt)
        elif self.ctx.state is UeState.HANDOVER:
            self.held.append(pkt)
            if len(self.held) > HANDOVER_BUFFER_PACKETS:
                self.held.popleft()
                self.counters["held_overflow"] += 1
        else:
            self.counters["tx_without_session"] += 1

    # -- receive -------------------------------------------------------

    def receive(self, pkt: Packet) -> None:
        if pkt.pkt_class is PacketClass.DATA:
            self.net.deliver(pkt)
        elif pkt.pkt_class is PacketClass.NAS:
            self._on_nas(pkt.payload)
        elif isinstance(pkt.payload, ProbeResponse):
            if self.ctx.state is UeState.SCANNING:
                self._responses[pkt.payload.ap] = self.net.rssi(pkt.payload.ap, self)
        elif isinstance(pkt.payload, AssocResponse):
            self._on_assoc_response(pkt.payload)
        elif isinstance(pkt.payload, DisassocFrame):
            self._on_disassoc(pkt.payload)
        elif isinstance(pkt.payload, IkeResponse):
            self._on_ike_response()


class ApNode:
    """Radio side of an AP: answers frames, bridges UE traffic to the WAE, applies SBI commands."""

    def __init__(self, net: "Network", ap: Ap):
        self.net = net
        self.ap = ap
        self.node = ap.ap

    def _event(self, kind: ApEventKind, **fields) -> None:
        event = ApEvent(kind, self.node, **fields)
        self.net.ap_to_wae(self.node, Packet(PacketClass.MGMT, self.node, self.net.wae.node, 32, self.net.sim.now, payload=event))

    def _frame(self, ue: NodeId, frame, size: int) -> None:
        self.net.air_down(self.node, Packet(PacketClass.MGMT, self.node, ue, size, self.net.sim.now, payload=frame))

    def from_air(self, pkt: Packet) -> None:
        ue = pkt.src
        frame = pkt.payload
        if isinstance(frame, ProbeRequest):
            self._event(ApEventKind.PROBE_HEARD, ue=ue, rssi_dbm=round(self.net.rssi(self.node, self.net.ues[ue]), 2))
            result = self.ap.handle_probe(ue)
            if isinstance(result, ProbeResponse):
                self._frame(ue, result, PROBE_RESPONSE_BYTES)
            return
        if isinstance(frame, AssocRequest):
            accepted = self.ap.handle_assoc_request(ue)
            self._event(ApEventKind.ASSOCIATED if accepted else ApEventKind.ASSOC_DENIED, ue=ue)
            if not accepted:
                self.net.counters["association_denials"] += 1
            self._frame(ue, AssocResponse(self.node, accepted), ASSOC_FRAME_BYTES)
            return
        if isinstance(frame, LeaveNotice):
            if self.ap.disassociate(ue):
                self.net.counters["disassociations"] += 1
                self._event(ApEventKind.DISASSOCIATED, ue=ue)
            return
        if ue not in self.ap.state.associated:
            self.ap.counters["unassociated_drops"] += 1
            return
        self.net.ap_to_wae(self.node, pkt)

    def from_wae(self, pkt: Packet) -> None:
        command = pkt.payload
        if isinstance(command, ApplyConfig):
            self.ap.apply(command)
            self.net.sim.trace(self.node, "config_applied", f"ch={self.ap.state.channel}")
            self._event(ApEventKind.CONFIG_APPLIED, request_id=command.request_id)
        elif isinstance(command, Disassociate):
            if self.ap.disassociate(command.ue):
                self.net.counters["disassociations"] += 1
                self._frame(command.ue, DisassocFrame(self.node, command.target_hint), ASSOC_FRAME_BYTES)
                self._event(ApEventKind.DISASSOCIATED, ue=command.ue)
        elif isinstance(command, SteerDeny):
            self.ap.set_steer_deny(command)
        elif pkt.dst in self.ap.state.associated:
            self.net.air_down(self.node, pkt)
        else:
            self.ap.counters["unassociated_drops"] += 1


class Network:
    """One scenario instantiated for one mode."""

    def __init__(
        self,
        scenario: Scenario,
        mode: Mode | str,
        seed: int | None = None,
        *,
        keep_trace: bool = False,
        check_invariants: bool = CHECK_INVARIANTS,
        radio: RadioModel = DEFAULT_RADIO,
    ):
        self.scenario = scenario
        self.mode = Mode(mode)
        self.seed = scenario.seed if seed is None else seed
        self.sim = Simulator(self.seed, keep_trace)
        self.radio = radio
        self.counters: Counter[str] = Counter()
        self.flows: dict[tuple[int, str, Direction], FlowStats] = {}
        self.slice_bins: dict[str, Counter[int]] = {}
        self.n3_bytes: Counter[int] = Counter()
        self.controller_data_bytes = 0
        self.conflict_series: list[tuple[int, int]] = []
        self.directive_failures: list[str] = []

        self.ap_nodes: dict[NodeId, ApNode] = {}
        for spec in scenario.topology.aps:
            state = ApState(
                ap_id(spec.index),
                spec.position,
                spec.channel,
                spec.tx_power_dbm,
                max_associated=spec.max_associated,
                radio_capacity_mbps=spec.radio_capacity_mbps,
            )
            self.ap_nodes[state.ap] = ApNode(self, Ap(state))

        self._build_links()

        subscribers = {
            ue_id(s.ue): Subscriber(s.key, s.qos, s.traffic_class) for s in scenario.subscribers
        }
        self.upf = Upf()
        self.amf = Amf(subscribers, self.sim.rng(Stream.NONCE), self.upf)

        wae_index = scenario.topology.wae
        self.wae = Wae(
            wae_index,
            sorted(self.ap_nodes),
            now=lambda: self.sim.now,
            schedule=self.sim.schedule,
            cmi_out=self._wae_cmi_out,
            to_ap=self._wae_to_ap,
            to_n2=self._wae_to_n2,
            to_n3=self._wae_to_n3,
            stats_source=self.wae_stats,
        )
        self.controller = RanController(
            send=self._controller_cmi_out,
            clock=lambda: self.sim.now,
            schedule=self.sim.schedule,
            known_ues=[ue_id(u.ue) for u in scenario.ues],
        )
        for name, params in scenario.apps.items():
            self.controller.register_app(build_app(name, params))
        self.controller.established_hooks.append(self._on_control_established)
        self._wae_decoder = StreamDecoder()
        self._controller_decoder = StreamDecoder()

        self.ues: dict[NodeId, UeAgent] = {}
        for spec in scenario.ues:
            subscriber = scenario.subscriber(spec.ue)
            key = spec.key or (subscriber.key if subscriber else bytes(16))
            self.ues[ue_id(spec.ue)] = UeAgent(self, spec, key)
        self._dl_seq: Counter[tuple[int, str]] = Counter()

        self._pump_time: int | None = None
        self._pump_gen = 0

        if check_invariants:
            self.sim.checks.append(self.check_invariants)

    # -- topology --------------------------------------------------------

    def _pair(self, name: str, a: NodeId, b: NodeId, capacity_mbps: float, prop_delay_us: int) -> LinkPair:
        return LinkPair(
            name,
            Link(self.sim, f"{name}.up", a, b, capacity_mbps, prop_delay_us),
            Link(self.sim, f"{name}.down", b, a, capacity_mbps, prop_delay_us),
        )

    def _build_links(self) -> None:
        topology = self.scenario.topology
        wae = wae_id(topology.wae)
        self.air: dict[NodeId, LinkPair] = {}
        self.ap_wae: dict[NodeId, LinkPair] = {}
        for ap, node in self.ap_nodes.items():
            capacity = node.ap.state.radio_capacity_mbps
            self.air[ap] = self._pair(f"air{ap.index}", ap, ap, capacity, WIRELESS_PROP_DELAY_US)
            spec = topology.link("ap_wae")
            self.ap_wae[ap] = self._pair(f"ap_wae{ap.index}", ap, wae, spec.capacity_mbps, spec.prop_delay_us)

        self.links: dict[str, LinkPair] = {}
        names = ("cmi", "n2", "n3", "dn") if self.mode is Mode.PROPOSED else ("ac", "ac_upf", "n2", "dn")
        ends = {
            "cmi": (wae, CONTROLLER_NODE),
            "ac": (wae, CONTROLLER_NODE),
            "ac_upf": (CONTROLLER_NODE, UPF_NODE),
            "n2": (wae, AMF_NODE),
            "n3": (wae, UPF_NODE),
            "dn": (UPF_NODE, DN_NODE),
        }
        for name in names:
            spec = topology.link(name)
            self.links[name] = self._pair(name, *ends[name], spec.capacity_mbps, spec.prop_delay_us)

    @property
    def control_link(self) -> LinkPair:
        return self.links["cmi" if self.mode is Mode.PROPOSED else "ac"]

    def all_links(self) -> dict[str, LinkPair]:
        named = {pair.name: pair for pair in self.air.values()}
        named.update({pair.name: pair for pair in self.ap_wae.values()})
        named.update(self.links)
        return named

    # -- radio -----------------------------------------------------------

    def rssi(self, ap: NodeId, ue: UeAgent) -> float:
        state = self.ap_nodes[ap].ap.state
        dbm = self.radio.rssi(state.tx_power_dbm, state.position, ue.position())
        return dbm + ue.spec.rssi_bias_db.get(ap.index, 0.0)

    def audible_aps(self, ue: UeAgent) -> list[NodeId]:
        return [ap for ap in sorted(self.ap_nodes) if self.rssi(ap, ue) >= ASSOC_THRESHOLD_DBM]

    def conflict_graph(self):
        return build_conflict_graph([node.ap.state for _, node in sorted(self.ap_nodes.items())], self.radio)

    def wae_stats(self) -> dict:
        """Measurement snapshot the WAE reports upstream every stats interval."""
        graph = self.conflict_graph()
        aps = []
        for ap, node in sorted(self.ap_nodes.items()):
            neighbors = neighbors_of(graph, ap)
            interference = Counter(self.ap_nodes[n].ap.state.channel for n in neighbors)
            aps.append(
                {
                    "ap": ap.index,
                    "load": node.ap.state.load,
                    "channel": node.ap.state.channel,
                    "neighbors": sorted(n.index for n in neighbors),
                    "interference": {str(ch): n for ch, n in sorted(interference.items())},
                }
            )
        ues = []
        for node, agent in sorted(self.ues.items()):
            if agent.ctx.state not in SERVING_STATES:
                continue
            serving = self.wae.ue_ap.get(node)
            rssi = {str(ap.index): round(self.rssi(ap, agent), 2) for ap in self.audible_aps(agent)}
            ues.append({"ue": node.index, "ap": serving.index if serving else None, "rssi": rssi})
        return {"aps": aps, "ues": ues}

    # -- ports -----------------------------------------------------------

    def air_up(self, ap: NodeId, pkt: Packet) -> None:
        self.air[ap].up.transmit(pkt, self.ap_nodes[ap].from_air)

    def air_down(self, ap: NodeId, pkt: Packet) -> None:
        agent = self.ues.get(pkt.dst)
        if agent is not None:
            self.air[ap].down.transmit(pkt, agent.receive)

    def ap_to_wae(self, ap: NodeId, pkt: Packet) -> None:
        self.ap_wae[ap].up.transmit(pkt, lambda p: self.wae.receive_from_ap(ap, p))

    def _wae_to_ap(self, ap: NodeId, pkt: Packet) -> None:
        self.ap_wae[ap].down.transmit(pkt, self.ap_nodes[ap].from_wae)

    def _wae_to_n2(self, message: N2Message) -> None:
        pkt = Packet(PacketClass.NAS, self.wae.node, AMF_NODE, message.size_bytes, self.sim.now, payload=message)
        self.links["n2"].up.transmit(pkt, self._amf_receive)

    def _amf_receive(self, pkt: Packet) -> None:
        message: N2Message = pkt.payload
        reply = self.amf.handle_uplink_nas(message.ue, message.nas)
        self.sim.trace(AMF_NODE, "nas", f"{message.ue}")
        out = Packet(PacketClass.NAS, AMF_NODE, self.wae.node, reply.size_bytes, self.sim.now, payload=reply)
        self.links["n2"].down.transmit(out, lambda p: self.wae.receive_n2(p.payload))

    # -- CMI transport ----------------------------------------------------

    def _cmi_packet(self, msg: CmiMessage, src: NodeId, dst: NodeId) -> Packet:
        frame = encode_frame(msg)
        self.sim.trace(src, "cmi", f"{msg.msg_type.name}:{msg.correlation_id:x}")
        return Packet(PacketClass.CMI, src, dst, len(frame), self.sim.now, payload=frame)

    def _controller_cmi_out(self, msg: CmiMessage) -> None:
        pkt = self._cmi_packet(msg, CONTROLLER_NODE, self.wae.node)
        self.control_link.down.transmit(pkt, self._wae_from_control)

    def _wae_cmi_out(self, msg: CmiMessage) -> None:
        pkt = self._cmi_packet(msg, self.wae.node, CONTROLLER_NODE)
        self.control_link.up.transmit(pkt, self._controller_from_control)

    def _decode(self, decoder: StreamDecoder, data: bytes, handle: Callable[[CmiMessage], object]) -> None:
        for item in decoder.feed(data):
            if isinstance(item, DecodeError):
                self.counters["cmi_decode_errors"] += 1
                logger.warning("CMI decode error: %s", item)
            else:
                handle(item)

    def _wae_from_control(self, pkt: Packet) -> None:
        if pkt.pkt_class is PacketClass.CMI:
            self._decode(self._wae_decoder, pkt.payload, self.wae.handle_cmi)
        else:
            self.wae.forward(pkt)

    def _controller_from_control(self, pkt: Packet) -> None:
        if pkt.pkt_class is PacketClass.CMI:
            self._decode(self._controller_decoder, pkt.payload, self.controller.receive)
            return
        self.controller_data_bytes += pkt.size_bytes
        self.links["ac_upf"].up.transmit(pkt, self._upf_uplink)

    # -- user plane ------------------------------------------------------

    def _wae_to_n3(self, pkt: Packet, rule: FlowRule) -> None:
        if self.mode is Mode.SPLITMAC:
            self.control_link.up.transmit(pkt, self._controller_from_control)
            return
        accepted = self.wae.scheduler.enqueue(rule.slice_id, pkt, pkt.size_bytes, rule.key, rule.qos.rate_mbps, self.sim.now)
        if not accepted:
            self.counters["scheduler_drops"] += 1
        self._kick(self.sim.now)

    def _kick(self, at_us: int) -> None:
        if self._pump_time is not None and self._pump_time <= at_us:
            return
        self._pump_time = at_us
        self._pump_gen += 1
        self.sim.at(at_us, self._pump, self._pump_gen)

    def _pump(self, generation: int) -> None:
        if generation != self._pump_gen:
            return
        self._pump_time = None
        link = self.links["n3"].up
        if link.backlog() > 0:
            self._kick(link.busy_until)
            return
        pkt, wake_at = self.wae.scheduler.dequeue(self.sim.now)
        if pkt is not None:
            link.transmit(pkt, self._upf_uplink)
            self._kick(link.busy_until)
        elif wake_at is not None:
            self._kick(wake_at)

    def _upf_uplink(self, pkt: Packet) -> None:
        ue = pkt.flow[0]
        self.n3_bytes[ue] += pkt.size_bytes
        try:
            inner = self.upf.upf_terminate(pkt.tunnel_id, pkt.size_bytes)
        except UnknownTunnel:
            self.counters["unknown_tunnel"] += 1
            return
        out = replace(pkt, size_bytes=inner, tunnel_id=None)
        self.links["dn"].up.transmit(out, self.deliver)

    def downlink_arrival(self, ue: NodeId, spec: TrafficSpec) -> None:
        flow = (ue.index, spec.traffic_class)
        self._dl_seq[flow] += 1
        pkt = Packet(
            PacketClass.DATA,
            DN_NODE,
            ue,
            spec.pkt_bytes,
            self.sim.now,
            seq_no=self._dl_seq[flow],
            flow=flow,
            direction=Direction.DOWN,
        )
        self.flow(flow, Direction.DOWN).offered(pkt)
        self.links["dn"].down.transmit(pkt, self._upf_downlink)

    def _upf_downlink(self, pkt: Packet) -> None:
        try:
            tunnel_id, size = self.upf.encapsulate_downlink(pkt.dst, pkt.size_bytes)
        except UnknownTunnel:
            self.counters["unknown_tunnel"] += 1
            return
        out = replace(pkt, size_bytes=size, tunnel_id=tunnel_id)
        self.n3_bytes[pkt.flow[0]] += size
        if self.mode is Mode.PROPOSED:
            self.links["n3"].down.transmit(out, self.wae.forward)
        else:
            self.links["ac_upf"].down.transmit(out, self._controller_downlink)

    def _controller_downlink(self, pkt: Packet) -> None:
        self.controller_data_bytes += pkt.size_bytes
        self.control_link.down.transmit(pkt, self._wae_from_control)

    def flow(self, flow: tuple[int, str], direction: Direction) -> FlowStats:
        key = (flow[0], flow[1], direction)
        if key not in self.flows:
            self.flows[key] = FlowStats(flow[0], flow[1], direction)
        return self.flows[key]

    def deliver(self, pkt: Packet) -> None:
        """Final receiver for data: the DN for uplink, the UE for downlink."""
        now = self.sim.now
        self.flow(pkt.flow, pkt.direction).received(pkt, now)
        slice_id = pkt.slice_id or "unclassified"
        self.slice_bins.setdefault(slice_id, Counter())[now // SERIES_BIN_US] += pkt.size_bytes
        self.sim.trace(pkt.dst, "rx", f"{pkt.flow[0]}:{pkt.flow[1]}:{pkt.seq_no}")

    def drive(self, arrivals: Iterator[int], fire: Callable[[], None]) -> None:
        """Schedule arrivals lazily, one pending event per generator."""
        time_us = next(arrivals, None)
        if time_us is None or time_us > self.scenario.duration_us:
            return

        def step():
            fire()
            self.drive(arrivals, fire)

        self.sim.at(time_us, step)

    # -- control-side orchestration ---------------------------------------

    def _on_control_established(self) -> None:
        self.sim.trace(CONTROLLER_NODE, "established")
        for template in self.scenario.slices:
            try:
                self.controller.nv_slice_crud(CrudOp.CREATE, template)
            except ControllerError as exc:
                self._directive_failed(f"initial slice {template.slice_id}: {exc}")
        self.sim.schedule(AUDIT_INTERVAL_US, self._audit_tick)

    def _audit_tick(self) -> None:
        self.controller.audit()
        self.sim.schedule(AUDIT_INTERVAL_US, self._audit_tick)

    def _directive_failed(self, message: str) -> None:
        self.directive_failures.append(message)
        logger.warning("directive failed: %s", message)

    def execute_directive(self, op: str, args: dict) -> None:
        try:
            if op in ("slice_create", "slice_update"):
                template = SliceTemplate.from_payload({"weight": 1, **args["template"]})
                self.controller.nv_slice_crud(CrudOp.CREATE if op == "slice_create" else CrudOp.UPDATE, template)
            elif op == "slice_delete":
                self.controller.nv_slice_crud(CrudOp.DELETE, args["slice_id"], force=bool(args.get("force")))
            elif op == "set_param":
                self.controller.set_app_param(args["app"], args["key"], args["value"])
            elif op == "push_config":
                policy = MgmtPolicy.from_payload(args["mgmt_policy"]) if args.get("mgmt_policy") else None
                self.controller.rmf_push_config(
                    ap_id(args["ap"]),
                    channel=args.get("channel"),
                    tx_power_dbm=args.get("tx_power_dbm"),
                    mgmt_policy=policy,
                )
        except (ControllerError, ValueError, KeyError) as exc:
            self._directive_failed(f"{op} at {self.sim.now} us: {exc}")
            return
        self.sim.trace(CONTROLLER_NODE, "directive", op)

    def _sample_conflicts(self) -> None:
        assignment = {ap: node.ap.state.channel for ap, node in self.ap_nodes.items()}
        self.conflict_series.append((self.sim.now, count_conflicts(self.conflict_graph(), assignment)))
        self.sim.schedule(STATS_INTERVAL_US, self._sample_conflicts)

    def check_invariants(self) -> None:
        orphans = sessions_without_authentication(self.amf, self.upf)
        if orphans:
            raise InvariantViolation(f"UPF sessions without authentication: {orphans}")
        for agent in self.ues.values():
            if len(agent.anchors) > 1:
                raise InvariantViolation(f"{agent.node} changed anchor or tunnel: {sorted(agent.anchors)}")
        if not self.wae.table.consistent():
            raise InvariantViolation("flow table index diverged from its rules")

    # -- run -------------------------------------------------------------

    def start(self) -> None:
        self.sim.schedule(0, self.controller.start)
        self.sim.schedule(0, self._sample_conflicts)
        for agent in self.ues.values():
            self.sim.at(agent.spec.arrive_us, agent.scan)
        for directive in self.scenario.directives:
            self.sim.at(directive.time_us, self.execute_directive, directive.op, directive.args)

    def run(self) -> MetricsReport:
        self.start()
        self.sim.run(self.scenario.duration_us + 1)
        logger.info(
            "%s/%s finished: %d trace events, digest %s",
            self.scenario.name,
            self.mode.value,
            self.sim.trace_events,
            self.sim.digest,
        )
        return build_report(self)


def run(
    scenario: Scenario,
    mode: Mode | str,
    seed: int | None = None,
    *,
    trace_path: Path | None = None,
    check_invariants: bool = CHECK_INVARIANTS,
) -> MetricsReport:
    """
    Simulate a scenario in one mode.

    Args:
        scenario: Validated scenario.
        mode: "proposed" or "splitmac".
        seed: Overrides the scenario seed.
        trace_path: When set, the full event trace is written there as JSON lines.
        check_invariants: Evaluate runtime invariants after every event.

    Raises:
        InvariantViolation: A runtime check failed.
    """
    net = Network(scenario, mode, seed, keep_trace=trace_path is not None, check_invariants=check_invariants)
    report = net.run()
    if trace_path is not None:
        header = {"scenario": scenario_to_dict(scenario), "mode": net.mode.value, "seed": net.seed}
        net.sim.dump_trace(Path(trace_path), header)
    return report
