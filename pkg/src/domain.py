"""Shared vocabulary types and the UE lifecycle state machine."""

from dataclasses import dataclass, field, replace
from enum import Enum

from .config import (
    CHANNELS,
    DEFAULT_QOS_LATENCY_US,
    DEFAULT_QOS_PRIORITY,
    DEFAULT_QOS_RATE_MBPS,
    DEFAULT_SLICE,
    MAX_ASSOCIATED,
)


class DomainError(Exception):
    """Base class for domain-model errors."""


class IllegalTransition(DomainError):
    """A (state, trigger) pair outside the transition table."""

    def __init__(self, state: "UeState", trigger: "Trigger", reason: str = ""):
        self.state = state
        self.trigger = trigger
        detail = f" ({reason})" if reason else ""
        super().__init__(f"illegal transition {state.value} --{trigger.value}-->{detail}")


class NodeKind(str, Enum):
    UE = "UE"
    AP = "AP"
    WAE = "WAE"
    CONTROLLER = "CONTROLLER"
    AMF = "AMF"
    UPF = "UPF"
    DN = "DN"


@dataclass(frozen=True, order=True)
class NodeId:
    kind: NodeKind
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"node index must be non-negative, got {self.index}")

    def __str__(self) -> str:
        return f"{self.kind.value.lower()}{self.index}"


def ue_id(index: int) -> NodeId:
    return NodeId(NodeKind.UE, index)


def ap_id(index: int) -> NodeId:
    return NodeId(NodeKind.AP, index)


def wae_id(index: int = 0) -> NodeId:
    return NodeId(NodeKind.WAE, index)


@dataclass(frozen=True)
class QosProfile:
    """Flow QoS attributes handed from the 5G core to the RAN."""

    rate_mbps: float = DEFAULT_QOS_RATE_MBPS
    priority: int = DEFAULT_QOS_PRIORITY
    latency_budget_us: int = DEFAULT_QOS_LATENCY_US

    def __post_init__(self):
        if not self.rate_mbps > 0:
            raise ValueError(f"rate_mbps must be positive, got {self.rate_mbps}")
        if not 0 <= self.priority <= 7:
            raise ValueError(f"priority must be within 0..7, got {self.priority}")
        if self.latency_budget_us <= 0:
            raise ValueError(f"latency_budget_us must be positive, got {self.latency_budget_us}")


class UeState(str, Enum):
    IDLE = "IDLE"
    SCANNING = "SCANNING"
    ASSOCIATING = "ASSOCIATING"
    AUTHENTICATING = "AUTHENTICATING"
    REGISTERED = "REGISTERED"
    SESSION_ACTIVE = "SESSION_ACTIVE"
    HANDOVER = "HANDOVER"


class Trigger(str, Enum):
    PROBE_SENT = "PROBE_SENT"
    ASSOC_OK = "ASSOC_OK"
    AUTH_START = "AUTH_START"
    AUTH_OK = "AUTH_OK"
    AUTH_FAIL = "AUTH_FAIL"
    SESSION_OK = "SESSION_OK"
    STEER = "STEER"
    HO_DONE = "HO_DONE"
    DETACH = "DETACH"


SERVING_STATES = frozenset(
    {UeState.AUTHENTICATING, UeState.REGISTERED, UeState.SESSION_ACTIVE, UeState.HANDOVER}
)
TUNNEL_STATES = frozenset({UeState.SESSION_ACTIVE, UeState.HANDOVER})

# (state, trigger) -> next state; DETACH is handled separately for every non-IDLE state.
TRANSITIONS: dict[tuple[UeState, Trigger], UeState] = {
    (UeState.IDLE, Trigger.PROBE_SENT): UeState.SCANNING,
    (UeState.SCANNING, Trigger.PROBE_SENT): UeState.SCANNING,
    (UeState.SCANNING, Trigger.ASSOC_OK): UeState.ASSOCIATING,
    (UeState.ASSOCIATING, Trigger.AUTH_START): UeState.AUTHENTICATING,
    (UeState.AUTHENTICATING, Trigger.AUTH_OK): UeState.REGISTERED,
    (UeState.AUTHENTICATING, Trigger.AUTH_FAIL): UeState.IDLE,
    (UeState.REGISTERED, Trigger.SESSION_OK): UeState.SESSION_ACTIVE,
    (UeState.SESSION_ACTIVE, Trigger.STEER): UeState.HANDOVER,
    (UeState.HANDOVER, Trigger.HO_DONE): UeState.SESSION_ACTIVE,
}


@dataclass(frozen=True)
class UeContext:
    """Per-UE lifecycle state. anchor_wae is write-once."""

    ue: NodeId
    auth_key: bytes
    state: UeState = UeState.IDLE
    serving_ap: NodeId | None = None
    anchor_wae: NodeId | None = None
    tunnel_id: int | None = None
    qos: QosProfile | None = None
    slice_id: str | None = None

    def __post_init__(self):
        if len(self.auth_key) != 16:
            raise ValueError("auth_key must be 16 bytes")
        if (self.serving_ap is not None) != (self.state in SERVING_STATES):
            raise ValueError(f"serving_ap inconsistent with state {self.state.value}")
        if (self.tunnel_id is not None) != (self.state in TUNNEL_STATES):
            raise ValueError(f"tunnel_id inconsistent with state {self.state.value}")
        if self.tunnel_id is not None and not 0 <= self.tunnel_id < 1 << 32:
            raise ValueError("tunnel_id must fit in 32 bits")


def ue_transition(
    ctx: UeContext,
    trigger: Trigger,
    *,
    ap: NodeId | None = None,
    wae: NodeId | None = None,
    tunnel_id: int | None = None,
    qos: QosProfile | None = None,
    slice_id: str | None = None,
) -> UeContext:
    """
    Apply a trigger to a UE context.

    AUTH_START needs `ap` and `wae` (the anchor is only taken when none is set),
    SESSION_OK needs `tunnel_id`, HO_DONE needs the new `ap`.

    Raises:
        IllegalTransition: If the pair is not in the transition table or a
            required argument is missing.
    """
    if trigger is Trigger.DETACH:
        if ctx.state is UeState.IDLE:
            raise IllegalTransition(ctx.state, trigger)
        return replace(ctx, state=UeState.IDLE, serving_ap=None, tunnel_id=None, qos=None, slice_id=None)

    nxt = TRANSITIONS.get((ctx.state, trigger))
    if nxt is None:
        raise IllegalTransition(ctx.state, trigger)

    if trigger is Trigger.AUTH_START:
        if ap is None or (wae is None and ctx.anchor_wae is None):
            raise IllegalTransition(ctx.state, trigger, "AUTH_START needs ap and wae")
        anchor = ctx.anchor_wae if ctx.anchor_wae is not None else wae
        return replace(ctx, state=nxt, serving_ap=ap, anchor_wae=anchor)
    if trigger is Trigger.AUTH_FAIL:
        return replace(ctx, state=nxt, serving_ap=None)
    if trigger is Trigger.SESSION_OK:
        if tunnel_id is None:
            raise IllegalTransition(ctx.state, trigger, "SESSION_OK needs tunnel_id")
        return replace(ctx, state=nxt, tunnel_id=tunnel_id, qos=qos, slice_id=slice_id)
    if trigger is Trigger.HO_DONE:
        if ap is None:
            raise IllegalTransition(ctx.state, trigger, "HO_DONE needs the new ap")
        return replace(ctx, state=nxt, serving_ap=ap)
    return replace(ctx, state=nxt)


@dataclass(frozen=True)
class MgmtPolicy:
    suppress_probe_above_load: int | None = None
    deny_list: frozenset[NodeId] = frozenset()

    def __post_init__(self):
        if self.suppress_probe_above_load is not None and self.suppress_probe_above_load < 0:
            raise ValueError("suppress_probe_above_load must be non-negative")

    def to_payload(self) -> dict:
        return {
            "suppress_probe_above_load": self.suppress_probe_above_load,
            "deny_list": sorted(ue.index for ue in self.deny_list),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "MgmtPolicy":
        return cls(
            suppress_probe_above_load=payload.get("suppress_probe_above_load"),
            deny_list=frozenset(ue_id(i) for i in payload.get("deny_list") or ()),
        )


@dataclass(frozen=True)
class ApState:
    ap: NodeId
    position: tuple[float, float]
    channel: int = CHANNELS[0]
    tx_power_dbm: float = 20.0
    associated: frozenset[NodeId] = frozenset()
    mgmt_policy: MgmtPolicy = field(default_factory=MgmtPolicy)
    radio_capacity_mbps: float = 50.0
    max_associated: int = MAX_ASSOCIATED

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ValueError(f"channel {self.channel} not in {CHANNELS}")
        if len(self.associated) > self.max_associated:
            raise ValueError(f"{self.ap} exceeds {self.max_associated} associated UEs")
        if not self.radio_capacity_mbps > 0:
            raise ValueError("radio_capacity_mbps must be positive")

    @property
    def load(self) -> int:
        return len(self.associated)


class Direction(str, Enum):
    UP = "up"
    DOWN = "down"


class RuleStatus(str, Enum):
    PENDING = "PENDING"
    CONFIRMED = "CONFIRMED"
    FAILED = "FAILED"


@dataclass(frozen=True)
class SliceFilter:
    """
    Match on UE set and/or traffic class tags.

    An empty side matches everything on that axis; a filter with both sides
    empty matches nothing (the default slice takes unmatched traffic).
    """

    ues: frozenset[int] = frozenset()
    traffic_classes: frozenset[str] = frozenset()

    @property
    def empty(self) -> bool:
        return not self.ues and not self.traffic_classes

    def matches(self, ue: int, traffic_class: str) -> bool:
        if self.empty:
            return False
        return (not self.ues or ue in self.ues) and (
            not self.traffic_classes or traffic_class in self.traffic_classes
        )

    def overlaps(self, other: "SliceFilter") -> bool:
        if self.empty or other.empty:
            return False
        ue_overlap = not self.ues or not other.ues or bool(self.ues & other.ues)
        tc_overlap = (
            not self.traffic_classes
            or not other.traffic_classes
            or bool(self.traffic_classes & other.traffic_classes)
        )
        return ue_overlap and tc_overlap


@dataclass(frozen=True)
class SliceTemplate:
    slice_id: str
    filter: SliceFilter = field(default_factory=SliceFilter)
    weight: int = 1
    rate_cap_mbps: float | None = None

    def __post_init__(self):
        if self.weight < 1:
            raise ValueError(f"slice weight must be >= 1, got {self.weight}")
        if self.rate_cap_mbps is not None and not self.rate_cap_mbps > 0:
            raise ValueError("rate_cap_mbps must be positive")

    def to_payload(self) -> dict:
        payload = {
            "slice_id": self.slice_id,
            "weight": self.weight,
            "ues": sorted(self.filter.ues),
            "traffic_classes": sorted(self.filter.traffic_classes),
        }
        if self.rate_cap_mbps is not None:
            payload["rate_cap_mbps"] = self.rate_cap_mbps
        return payload

    @classmethod
    def from_payload(cls, payload: dict) -> "SliceTemplate":
        return cls(
            slice_id=payload["slice_id"],
            filter=SliceFilter(
                ues=frozenset(payload.get("ues") or ()),
                traffic_classes=frozenset(payload.get("traffic_classes") or ()),
            ),
            weight=payload["weight"],
            rate_cap_mbps=payload.get("rate_cap_mbps"),
        )


@dataclass(frozen=True)
class FlowMatch:
    ue: int
    traffic_class: str = "default"
    direction: Direction = Direction.UP


@dataclass(frozen=True)
class FlowRule:
    """Match-action entry; `output` is "N3:<tunnel_id>" or "AP:<ap index>"."""

    rule_id: int
    match: FlowMatch
    output: str
    qos: QosProfile
    slice_id: str
    buffer: bool = False

    @property
    def key(self) -> tuple[int, str, Direction]:
        return (self.match.ue, self.match.traffic_class, self.match.direction)

    def to_payload(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "ue": self.match.ue,
            "traffic_class": self.match.traffic_class,
            "direction": self.match.direction.value,
            "out": self.output,
            "rate_mbps": self.qos.rate_mbps,
            "priority": self.qos.priority,
            "latency_budget_us": self.qos.latency_budget_us,
            "slice": self.slice_id,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "FlowRule":
        return cls(
            rule_id=payload["rule_id"],
            match=FlowMatch(
                ue=payload["ue"],
                traffic_class=payload.get("traffic_class", "default"),
                direction=Direction(payload.get("direction", Direction.UP.value)),
            ),
            output=payload["out"],
            qos=QosProfile(
                rate_mbps=payload["rate_mbps"],
                priority=payload["priority"],
                latency_budget_us=payload.get("latency_budget_us", DEFAULT_QOS_LATENCY_US),
            ),
            slice_id=payload.get("slice", DEFAULT_SLICE),
            buffer=payload.get("buffer", False),
        )


def parse_output(output: str) -> tuple[str, int]:
    """Split an action output ("N3:17", "AP:1") into (port kind, number)."""
    kind, _, number = output.partition(":")
    if kind not in ("N3", "AP") or not number.isdigit():
        raise ValueError(f"bad flow output {output!r}")
    return kind, int(number)
