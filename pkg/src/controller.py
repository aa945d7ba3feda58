"""RAN Controller: network view, RMF/FCF/RCF/NV functions and the AF hosting surface.

The controller is one serialized state machine. Inbound CMI messages, timer
expiries and app intents all run on the caller's single event loop; outbound
messages leave through the injected `send` callable.
"""

import logging
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Protocol

from .cmi import CONTROL_TYPES, CmiMessage, CmiSession, HandshakeError, MsgType, Role
from .config import (
    CHANNELS,
    DEFAULT_SLICE,
    MAX_ATTEMPTS,
    RETRANSMIT_TIMEOUT_US,
    RSSI_HISTORY_LEN,
    STATS_INTERVAL_US,
)
from .domain import (
    Direction,
    FlowMatch,
    FlowRule,
    MgmtPolicy,
    NodeId,
    QosProfile,
    RuleStatus,
    SliceTemplate,
    UeState,
    ap_id,
    ue_id,
)

logger = logging.getLogger(__name__)


class ControllerError(Exception):
    """Base class for controller operation errors."""


class UnknownNode(ControllerError):
    pass


class SliceCapExceeded(ControllerError):
    pass


class UnknownSlice(ControllerError):
    pass


class UeNotReady(ControllerError):
    pass


class SameAp(ControllerError):
    pass


class UnknownTarget(ControllerError):
    pass


class BadChannel(ControllerError):
    pass


class UnknownAp(ControllerError):
    pass


class DuplicateSlice(ControllerError):
    pass


class OverlappingFilter(ControllerError):
    pass


class SliceInUse(ControllerError):
    pass


class NotEstablished(ControllerError):
    pass


@dataclass
class ApView:
    ap: NodeId
    channel: int = CHANNELS[0]
    load: int = 0
    rssi_dbm: dict[NodeId, float] = field(default_factory=dict)
    interference_count: dict[int, int] = field(default_factory=dict)
    neighbors: frozenset[NodeId] = frozenset()
    config_status: RuleStatus | None = None
    mgmt_policy: MgmtPolicy = field(default_factory=MgmtPolicy)


@dataclass(frozen=True)
class RssiReport:
    time_us: int
    rssi_dbm: dict[NodeId, float]


@dataclass
class UeView:
    ue: NodeId
    state: UeState = UeState.SCANNING
    serving_ap: NodeId | None = None
    rssi_history: deque[RssiReport] = field(default_factory=lambda: deque(maxlen=RSSI_HISTORY_LEN))
    tunnel_id: int | None = None
    qos: QosProfile | None = None
    slice_id: str | None = None
    steered_to: NodeId | None = None


@dataclass
class NetworkView:
    aps: dict[NodeId, ApView] = field(default_factory=dict)
    ues: dict[NodeId, UeView] = field(default_factory=dict)
    slices: dict[str, SliceTemplate] = field(default_factory=dict)
    last_report_time: int = 0


class TriggerKind(str, Enum):
    RSSI_UPDATED = "RSSI_UPDATED"
    LOAD_UPDATED = "LOAD_UPDATED"
    INTERFERENCE_UPDATED = "INTERFERENCE_UPDATED"


@dataclass(frozen=True)
class AppTrigger:
    kind: TriggerKind
    node: NodeId | None = None


# Intents emitted by control apps and executed by the controller.
@dataclass(frozen=True)
class SteerIntent:
    ue: NodeId
    target_ap: NodeId


@dataclass(frozen=True)
class AssociationIntent:
    ue: NodeId
    target_ap: NodeId


@dataclass(frozen=True)
class ChannelIntent:
    ap: NodeId
    channel: int


@dataclass(frozen=True)
class PolicyIntent:
    ap: NodeId
    policy: MgmtPolicy


Intent = SteerIntent | AssociationIntent | ChannelIntent | PolicyIntent


class ControlApp(Protocol):
    name: str

    def on_trigger(self, view: NetworkView, trigger: AppTrigger) -> list[Intent]: ...

    def on_rule_failed(self, record: "RuleRecord") -> None: ...

    def set_param(self, key: str, value) -> None: ...


@dataclass
class RuleRecord:
    rule: FlowRule
    status: RuleStatus = RuleStatus.PENDING
    owner: str = "fcf"


@dataclass
class PendingRequest:
    msg: CmiMessage
    first_sent_us: int
    attempts: int = 1
    on_ack: Callable[[CmiMessage, "PendingRequest"], None] | None = None
    on_fail: Callable[[], None] | None = None


@dataclass(frozen=True)
class AuditResult:
    time_us: int
    missing_at_wae: frozenset[int]
    unexpected_at_wae: frozenset[int]

    @property
    def coherent(self) -> bool:
        return not self.missing_at_wae and not self.unexpected_at_wae


class CrudOp(str, Enum):
    CREATE = "CREATE"
    READ = "READ"
    UPDATE = "UPDATE"
    DELETE = "DELETE"


@dataclass(frozen=True)
class NvResult:
    messages: list[CmiMessage]
    template: SliceTemplate | None = None


class RanController:
    """SDN control plane for one WAE."""

    def __init__(
        self,
        *,
        send: Callable[[CmiMessage], None],
        clock: Callable[[], int],
        schedule: Callable[[int, Callable[[], None]], None],
        controller_id: int = 0,
        known_ues: Iterable[NodeId] | None = None,
        retransmit_timeout_us: int = RETRANSMIT_TIMEOUT_US,
        max_attempts: int = MAX_ATTEMPTS,
        stats_interval_us: int = STATS_INTERVAL_US,
    ):
        self._send = send
        self._clock = clock
        self._schedule = schedule
        self.controller_id = controller_id
        self.known_ues = frozenset(known_ues) if known_ues is not None else None
        self.retransmit_timeout_us = retransmit_timeout_us
        self.max_attempts = max_attempts
        self.stats_interval_us = stats_interval_us

        self.view = NetworkView(slices={DEFAULT_SLICE: SliceTemplate(DEFAULT_SLICE)})
        self.rules: dict[int, RuleRecord] = {}
        self.pending: dict[int, PendingRequest] = {}
        self.apps: list[ControlApp] = []
        self.established_hooks: list[Callable[[], None]] = []
        self.counters: Counter[str] = Counter()
        self.sent: Counter[MsgType] = Counter()
        self.flow_adds: Counter[NodeId] = Counter()
        self.rtt_samples: list[int] = []
        self.last_audit: AuditResult | None = None
        self.handover_count = 0

        self._next_rule_id = 1
        self._next_chain = 1
        self.session = CmiSession(Role.CONTROLLER, controller_id, hello_correlation=self._correlation(0, 0))

    # -- plumbing -------------------------------------------------------

    @staticmethod
    def _correlation(chain: int, step: int) -> int:
        return (chain << 32) | step

    def _new_chain(self) -> int:
        chain = self._next_chain
        self._next_chain += 1
        return chain

    def _dispatch(
        self,
        msg: CmiMessage,
        *,
        expect_ack: bool = True,
        on_ack: Callable[[CmiMessage, PendingRequest], None] | None = None,
        on_fail: Callable[[], None] | None = None,
    ) -> CmiMessage:
        if msg.msg_type not in CONTROL_TYPES:
            raise ControllerError(f"refusing to emit non-control message {msg.msg_type!r}")
        if expect_ack:
            self.pending[msg.correlation_id] = PendingRequest(msg, self._clock(), 1, on_ack, on_fail)
            self._arm(msg.correlation_id, 1)
        self.sent[msg.msg_type] += 1
        self._send(msg)
        return msg

    def _arm(self, correlation_id: int, attempt: int) -> None:
        self._schedule(self.retransmit_timeout_us, lambda: self._on_timeout(correlation_id, attempt))

    def _on_timeout(self, correlation_id: int, attempt: int) -> None:
        request = self.pending.get(correlation_id)
        if request is None or request.attempts != attempt:
            return
        if request.attempts >= self.max_attempts:
            del self.pending[correlation_id]
            self.counters["requests_failed"] += 1
            logger.warning("%s %x failed after %d attempts", request.msg.msg_type.name, correlation_id, attempt)
            if request.on_fail:
                request.on_fail()
            return
        request.attempts += 1
        self.counters["retransmits"] += 1
        self.sent[request.msg.msg_type] += 1
        self._send(request.msg)
        self._arm(correlation_id, request.attempts)

    def _require_session(self) -> None:
        if not self.session.established:
            raise NotEstablished("CMI session not established")

    def register_app(self, app: ControlApp) -> None:
        self.apps.append(app)

    def set_app_param(self, app_name: str, key: str, value) -> None:
        for app in self.apps:
            if app.name == app_name:
                app.set_param(key, value)
                return
        raise ControllerError(f"no app named {app_name!r}")

    # -- inbound --------------------------------------------------------

    def start(self) -> CmiMessage | None:
        """Open the CMI session; returns the HELLO that was sent."""
        hello = self.session.open()
        if hello is not None:
            self.sent[hello.msg_type] += 1
            self._send(hello)
        return hello

    def receive(self, msg: CmiMessage) -> None:
        if not self.session.established:
            try:
                self.session.handle(msg)
            except HandshakeError:
                self.counters["handshake_errors"] += 1
                return
            if self.session.established:
                self._on_established()
            return

        if msg.msg_type in (MsgType.FLOW_ACK, MsgType.CONFIG_ACK, MsgType.SLICE_ACK):
            self._complete(msg)
        elif msg.msg_type is MsgType.STATS_REPORT:
            self.run_apps(self.on_stats_report(msg.payload))
        elif msg.msg_type is MsgType.SESSION_NOTIFY:
            self.on_session_notify(msg.payload)
        elif msg.msg_type is MsgType.ERROR:
            self._on_error(msg)
        else:
            self.counters["unexpected_messages"] += 1

    def _on_established(self) -> None:
        for index in range(self.session.ap_count):
            self.view.aps.setdefault(ap_id(index), ApView(ap_id(index)))
        subscribe = CmiMessage(
            MsgType.STATS_SUBSCRIBE,
            self._correlation(self._new_chain(), 0),
            {"interval_us": self.stats_interval_us},
        )
        self._dispatch(subscribe, expect_ack=False)
        for hook in self.established_hooks:
            hook()

    def _complete(self, msg: CmiMessage) -> None:
        request = self.pending.pop(msg.correlation_id, None)
        if request is None:
            self.counters["stray_acks"] += 1
            return
        if request.on_ack:
            request.on_ack(msg, request)

    def _on_error(self, msg: CmiMessage) -> None:
        self.counters["errors_received"] += 1
        logger.warning("WAE error %s: %s", msg.payload.get("code"), msg.payload.get("detail"))
        request = self.pending.pop(msg.correlation_id, None)
        if request is not None and request.on_fail:
            request.on_fail()

    def on_stats_report(self, report: dict) -> list[AppTrigger]:
        """
        Fold a STATS_REPORT payload into the network view.

        A report naming any AP or UE outside the scenario is discarded whole
        and counted under "unknown_node".

        Returns:
            Triggers for the control apps.
        """
        try:
            parsed = self._parse_report(report)
        except (KeyError, TypeError, ValueError) as exc:
            self.counters["malformed_reports"] += 1
            logger.warning("discarding malformed stats report: %s", exc)
            return []
        except UnknownNode as exc:
            self.counters["unknown_node"] += 1
            logger.warning("discarding stats report: %s", exc)
            return []

        time_us, aps, ues = parsed
        triggers: list[AppTrigger] = []
        interference_changed = False
        for ap, load, channel, neighbors, interference in aps:
            view = self.view.aps[ap]
            view.load = load
            if channel is not None:
                view.channel = channel
            if neighbors is not None and neighbors != view.neighbors:
                view.neighbors = neighbors
                interference_changed = True
            if interference is not None and interference != view.interference_count:
                view.interference_count = interference
                interference_changed = True
            triggers.append(AppTrigger(TriggerKind.LOAD_UPDATED, ap))
        if interference_changed:
            triggers.append(AppTrigger(TriggerKind.INTERFERENCE_UPDATED))

        for ue, serving, rssi in ues:
            view = self.view.ues.setdefault(ue, UeView(ue))
            if serving is not None and view.state is not UeState.HANDOVER:
                view.serving_ap = serving
            for ap, dbm in rssi.items():
                self.view.aps[ap].rssi_dbm[ue] = dbm
            if view.rssi_history and view.rssi_history[-1].time_us > time_us:
                self.counters["stale_rssi"] += 1
                continue
            view.rssi_history.append(RssiReport(time_us, rssi))
            triggers.append(AppTrigger(TriggerKind.RSSI_UPDATED, ue))

        self.view.last_report_time = max(self.view.last_report_time, time_us)
        return triggers

    def _check_ap(self, index) -> NodeId:
        if not isinstance(index, int) or index < 0 or ap_id(index) not in self.view.aps:
            raise UnknownNode(f"unknown AP {index!r}")
        return ap_id(index)

    def _check_ue(self, index) -> NodeId:
        if not isinstance(index, int) or index < 0:
            raise UnknownNode(f"unknown UE {index!r}")
        ue = ue_id(index)
        if self.known_ues is not None and ue not in self.known_ues:
            raise UnknownNode(f"unknown UE {index!r}")
        return ue

    def _parse_report(self, report: dict):
        time_us = report.get("time_us", self._clock())
        aps = []
        for entry in report.get("aps") or []:
            ap = self._check_ap(entry["ap"])
            neighbors = None
            if "neighbors" in entry:
                neighbors = frozenset(self._check_ap(n) for n in entry["neighbors"])
            interference = None
            if "interference" in entry:
                interference = {int(ch): int(n) for ch, n in entry["interference"].items()}
            aps.append((ap, int(entry.get("load", 0)), entry.get("channel"), neighbors, interference))
        ues = []
        for entry in list(report.get("ues") or []) + list(report.get("probes") or []):
            ue = self._check_ue(entry["ue"])
            serving = self._check_ap(entry["ap"]) if entry.get("ap") is not None else None
            rssi = {self._check_ap(int(k)): float(v) for k, v in (entry.get("rssi") or {}).items()}
            ues.append((ue, serving, rssi))
        return time_us, aps, ues

    def on_session_notify(self, payload: dict) -> list[CmiMessage]:
        """
        Handle the WAE's relay of an N2 session setup (or handover completion).

        A first notification for a UE installs its uplink and downlink rules
        in the slice its filter selects, with the rate capped to the slice cap.
        """
        try:
            qos = QosProfile(payload["rate_mbps"], payload["priority"], payload["latency_budget_us"])
        except ValueError as exc:
            self.counters["malformed_session_notify"] += 1
            logger.warning("ignoring SESSION_NOTIFY for UE %s: %s", payload["ue"], exc)
            return []
        ue = ue_id(payload["ue"])
        view = self.view.ues.setdefault(ue, UeView(ue))
        ap = ap_id(payload["ap"]) if payload.get("ap") is not None else None
        tunnel_id = payload["tunnel_id"]

        if view.state is UeState.HANDOVER and view.tunnel_id == tunnel_id:
            view.state = UeState.SESSION_ACTIVE
            view.serving_ap = ap or view.serving_ap
            for record in self.rules_for(ue):
                if record.rule.match.direction is Direction.DOWN:
                    record.rule = replace(record.rule, output=f"AP:{view.serving_ap.index}", buffer=False)
            return []

        first = view.tunnel_id != tunnel_id or not self.rules_for(ue)
        view.state = UeState.SESSION_ACTIVE
        view.serving_ap = ap or view.serving_ap
        view.tunnel_id = tunnel_id
        view.qos = qos
        if not first:
            return []

        traffic_class = payload.get("traffic_class") or "default"
        slice_id = self.slice_for(ue.index, traffic_class)
        view.slice_id = slice_id
        cap = self.view.slices[slice_id].rate_cap_mbps
        if cap is not None and qos.rate_mbps > cap:
            qos = replace(qos, rate_mbps=cap)

        messages = [self.fcf_install_flow(ue, qos, slice_id, traffic_class=traffic_class)]
        if view.serving_ap is not None:
            messages.append(
                self.fcf_install_flow(ue, qos, slice_id, traffic_class=traffic_class, direction=Direction.DOWN)
            )
        return messages

    # -- AF hosting ------------------------------------------------------

    def run_apps(self, triggers: list[AppTrigger]) -> None:
        for app in self.apps:
            for trigger in triggers:
                for intent in app.on_trigger(self.view, trigger):
                    try:
                        self.execute(intent)
                    except ControllerError as exc:
                        self.counters["intents_rejected"] += 1
                        logger.info("%s intent %s rejected: %s", app.name, intent, exc)

    def execute(self, intent: Intent) -> list[CmiMessage]:
        if isinstance(intent, SteerIntent):
            return self.rcf_steer_ue(intent.ue, intent.target_ap)
        if isinstance(intent, AssociationIntent):
            return [self.rcf_steer_association(intent.ue, intent.target_ap)]
        if isinstance(intent, ChannelIntent):
            return [self.rcf_set_channel(intent.ap, intent.channel)]
        return [self.rcf_set_policy(intent.ap, intent.policy)]

    def _notify_owner(self, record: RuleRecord) -> None:
        for app in self.apps:
            if app.name == record.owner:
                app.on_rule_failed(record)

    # -- FCF -------------------------------------------------------------

    def rules_for(self, ue: NodeId) -> list[RuleRecord]:
        return [r for r in self.rules.values() if r.rule.match.ue == ue.index]

    def slice_for(self, ue: int, traffic_class: str) -> str:
        for template in self.view.slices.values():
            if template.filter.matches(ue, traffic_class):
                return template.slice_id
        return DEFAULT_SLICE

    def fcf_install_flow(
        self,
        ue: NodeId,
        qos: QosProfile,
        slice_id: str,
        *,
        traffic_class: str = "default",
        direction: Direction = Direction.UP,
        owner: str = "fcf",
    ) -> CmiMessage:
        """
        Emit FLOW_ADD for a UE flow; the rule stays PENDING until FLOW_ACK.

        Raises:
            UeNotReady: UE not registered/session-active or missing tunnel/AP.
            UnknownSlice: slice_id not in the slice table.
            SliceCapExceeded: qos rate above the slice's rate cap.
        """
        self._require_session()
        view = self.view.ues.get(ue)
        if view is None or view.state not in (UeState.REGISTERED, UeState.SESSION_ACTIVE):
            raise UeNotReady(f"{ue} is not ready for flows")
        template = self.view.slices.get(slice_id)
        if template is None:
            raise UnknownSlice(slice_id)
        if template.rate_cap_mbps is not None and qos.rate_mbps > template.rate_cap_mbps:
            raise SliceCapExceeded(f"{qos.rate_mbps} Mbps exceeds {slice_id} cap {template.rate_cap_mbps} Mbps")
        if direction is Direction.UP:
            if view.tunnel_id is None:
                raise UeNotReady(f"{ue} has no N3 tunnel")
            output = f"N3:{view.tunnel_id}"
        else:
            if view.serving_ap is None:
                raise UeNotReady(f"{ue} has no serving AP")
            output = f"AP:{view.serving_ap.index}"

        rule = FlowRule(
            rule_id=self._next_rule_id,
            match=FlowMatch(ue.index, traffic_class, direction),
            output=output,
            qos=qos,
            slice_id=slice_id,
        )
        self._next_rule_id += 1
        record = RuleRecord(rule, RuleStatus.PENDING, owner)
        self.rules[rule.rule_id] = record
        self.flow_adds[ue] += 1

        def confirmed(_msg, _request):
            record.status = RuleStatus.CONFIRMED

        def failed():
            record.status = RuleStatus.FAILED
            self._notify_owner(record)

        msg = CmiMessage(MsgType.FLOW_ADD, self._correlation(self._new_chain(), 0), rule.to_payload())
        return self._dispatch(msg, on_ack=confirmed, on_fail=failed)

    def fcf_remove_flow(self, rule_id: int, *, chain: int | None = None, step: int = 0) -> CmiMessage:
        self._require_session()
        record = self.rules.get(rule_id)
        if record is None:
            raise ControllerError(f"unknown rule {rule_id}")

        def removed(_msg, _request):
            self.rules.pop(rule_id, None)

        def failed():
            record.status = RuleStatus.FAILED
            self._notify_owner(record)

        chain = self._new_chain() if chain is None else chain
        msg = CmiMessage(MsgType.FLOW_DEL, self._correlation(chain, step), {"rule_id": rule_id})
        return self._dispatch(msg, on_ack=removed, on_fail=failed)

    # -- RCF -------------------------------------------------------------

    def rcf_steer_ue(self, ue: NodeId, target_ap: NodeId) -> list[CmiMessage]:
        """
        Hand a session-active UE over to another AP.

        Emits UE_STEER and a FLOW_MOD moving the downlink rule to the target
        port with buffering on; both share one correlation chain.

        Raises:
            UeNotReady, UnknownTarget, SameAp.
        """
        self._require_session()
        view = self.view.ues.get(ue)
        if view is None or view.state is not UeState.SESSION_ACTIVE or view.serving_ap is None:
            raise UeNotReady(f"{ue} is not session-active")
        if target_ap not in self.view.aps:
            raise UnknownTarget(str(target_ap))
        if target_ap == view.serving_ap:
            raise SameAp(str(target_ap))

        chain = self._new_chain()
        steer = CmiMessage(
            MsgType.UE_STEER,
            self._correlation(chain, 0),
            {"ue": ue.index, "from_ap": view.serving_ap.index, "to_ap": target_ap.index},
        )
        messages = [self._dispatch(steer, expect_ack=False)]

        for record in self.rules_for(ue):
            if record.rule.match.direction is not Direction.DOWN or record.status is RuleStatus.FAILED:
                continue
            record.rule = replace(record.rule, output=f"AP:{target_ap.index}", buffer=True)

            def failed(record=record):
                record.status = RuleStatus.FAILED
                self._notify_owner(record)

            mod = CmiMessage(
                MsgType.FLOW_MOD,
                self._correlation(chain, 1),
                {"rule_id": record.rule.rule_id, "out": record.rule.output, "buffer": True},
            )
            messages.append(self._dispatch(mod, on_fail=failed))
            break

        view.state = UeState.HANDOVER
        self.handover_count += 1
        return messages

    def rcf_steer_association(self, ue: NodeId, target_ap: NodeId) -> CmiMessage:
        """Steer a not-yet-associated UE towards target_ap (UE_STEER without from_ap)."""
        self._require_session()
        if target_ap not in self.view.aps:
            raise UnknownTarget(str(target_ap))
        view = self.view.ues.setdefault(ue, UeView(ue))
        view.steered_to = target_ap
        msg = CmiMessage(
            MsgType.UE_STEER,
            self._correlation(self._new_chain(), 0),
            {"ue": ue.index, "to_ap": target_ap.index},
        )
        return self._dispatch(msg, expect_ack=False)

    def _config_request(self, ap: NodeId, msg_type: MsgType, payload: dict, apply: Callable[[ApView], None]) -> CmiMessage:
        view = self.view.aps[ap]
        view.config_status = RuleStatus.PENDING

        def acked(_msg, _request):
            view.config_status = RuleStatus.CONFIRMED
            apply(view)

        def failed():
            view.config_status = RuleStatus.FAILED

        msg = CmiMessage(msg_type, self._correlation(self._new_chain(), 0), payload)
        return self._dispatch(msg, on_ack=acked, on_fail=failed)

    def rcf_set_channel(self, ap: NodeId, channel: int) -> CmiMessage:
        self._require_session()
        if ap not in self.view.aps:
            raise UnknownAp(str(ap))
        if channel not in CHANNELS:
            raise BadChannel(f"channel {channel} not in {CHANNELS}")

        def apply(view: ApView):
            view.channel = channel

        return self._config_request(ap, MsgType.CHANNEL_SET, {"ap": ap.index, "channel": channel}, apply)

    def rcf_set_policy(self, ap: NodeId, policy: MgmtPolicy) -> CmiMessage:
        self._require_session()
        if ap not in self.view.aps:
            raise UnknownAp(str(ap))

        def apply(view: ApView):
            view.mgmt_policy = policy

        return self._config_request(ap, MsgType.MGMT_POLICY_SET, {"ap": ap.index, **policy.to_payload()}, apply)

    # -- RMF -------------------------------------------------------------

    def rmf_push_config(
        self,
        ap: NodeId,
        *,
        channel: int | None = None,
        tx_power_dbm: float | None = None,
        mgmt_policy: MgmtPolicy | None = None,
    ) -> CmiMessage:
        """
        Emit CONFIG_SET for an AP; its config is PENDING until CONFIG_ACK.

        Raises:
            UnknownAp, BadChannel.
        """
        self._require_session()
        if ap not in self.view.aps:
            raise UnknownAp(str(ap))
        if channel is not None and channel not in CHANNELS:
            raise BadChannel(f"channel {channel} not in {CHANNELS}")

        payload: dict = {"ap": ap.index}
        if channel is not None:
            payload["channel"] = channel
        if tx_power_dbm is not None:
            payload["tx_power_dbm"] = tx_power_dbm
        if mgmt_policy is not None:
            payload["mgmt_policy"] = mgmt_policy.to_payload()

        def apply(view: ApView):
            if channel is not None:
                view.channel = channel
            if mgmt_policy is not None:
                view.mgmt_policy = mgmt_policy

        return self._config_request(ap, MsgType.CONFIG_SET, payload, apply)

    def audit(self) -> CmiMessage:
        """
        Send a CONFIG_GET; the reply's request-to-ACK time is a control RTT sample.

        When no flow request is in flight, the WAE's rule list is compared with
        the confirmed rule table and the result kept in `last_audit`.
        """
        self._require_session()

        def acked(msg: CmiMessage, request: PendingRequest):
            now = self._clock()
            self.rtt_samples.append(now - request.first_sent_us)
            if any(p.msg.msg_type in (MsgType.FLOW_ADD, MsgType.FLOW_MOD, MsgType.FLOW_DEL) for p in self.pending.values()):
                return
            at_wae = frozenset(msg.payload.get("rules") or ())
            confirmed = frozenset(i for i, r in self.rules.items() if r.status is RuleStatus.CONFIRMED)
            self.last_audit = AuditResult(now, confirmed - at_wae, at_wae - confirmed)
            if not self.last_audit.coherent:
                self.counters["audit_mismatches"] += 1

        def failed():
            self.counters["audit_timeouts"] += 1

        msg = CmiMessage(MsgType.CONFIG_GET, self._correlation(self._new_chain(), 0), {})
        return self._dispatch(msg, on_ack=acked, on_fail=failed)

    # -- NV --------------------------------------------------------------

    def nv_slice_crud(self, op: CrudOp, target: SliceTemplate | str, *, force: bool = False) -> NvResult:
        """
        Create, read, update or delete a slice template.

        Raises:
            DuplicateSlice, OverlappingFilter, SliceInUse, UnknownSlice.
        """
        self._require_session()
        op = CrudOp(op)
        slices = self.view.slices

        if op is CrudOp.CREATE:
            template = target
            if template.slice_id in slices:
                raise DuplicateSlice(template.slice_id)
            for other in slices.values():
                if template.filter.overlaps(other.filter):
                    raise OverlappingFilter(f"{template.slice_id} overlaps {other.slice_id}")
            slices[template.slice_id] = template
            msg = CmiMessage(MsgType.SLICE_CREATE, self._correlation(self._new_chain(), 0), template.to_payload())
            return NvResult([self._dispatch(msg)], template)

        slice_id = target.slice_id if isinstance(target, SliceTemplate) else target
        if slice_id not in slices:
            raise UnknownSlice(slice_id)

        if op is CrudOp.READ:
            msg = CmiMessage(MsgType.SLICE_READ, self._correlation(self._new_chain(), 0), {"slice_id": slice_id})
            return NvResult([self._dispatch(msg)], slices[slice_id])

        if op is CrudOp.UPDATE:
            template = target
            for other in slices.values():
                if other.slice_id != slice_id and template.filter.overlaps(other.filter):
                    raise OverlappingFilter(f"{slice_id} overlaps {other.slice_id}")
            slices[slice_id] = template
            msg = CmiMessage(MsgType.SLICE_UPDATE, self._correlation(self._new_chain(), 0), template.to_payload())
            return NvResult([self._dispatch(msg)], template)

        if slice_id == DEFAULT_SLICE:
            raise SliceInUse("the default slice cannot be deleted")
        referencing = [
            r for r in self.rules.values() if r.rule.slice_id == slice_id and r.status is not RuleStatus.FAILED
        ]
        if referencing and not force:
            raise SliceInUse(f"{slice_id} is referenced by {len(referencing)} rule(s)")
        chain = self._new_chain()
        messages = [
            self.fcf_remove_flow(r.rule.rule_id, chain=chain, step=step) for step, r in enumerate(referencing)
        ]
        delete = CmiMessage(
            MsgType.SLICE_DELETE,
            self._correlation(chain, len(referencing)),
            {"slice_id": slice_id, "force": force},
        )
        messages.append(self._dispatch(delete))
        removed = slices.pop(slice_id)
        return NvResult(messages, removed)
