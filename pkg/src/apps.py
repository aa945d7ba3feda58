"""Control applications: load balancing, admission control, mobility and channel management.

Decision functions are pure over NetworkView snapshots; the app classes wrap
them for the controller's trigger loop and emit intents the controller executes.
"""

import itertools
import logging
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple

import networkx as nx

from .config import (
    ADMISSION_HYSTERESIS,
    ADMISSION_THRESHOLD,
    ASSOC_THRESHOLD_DBM,
    CHANNELS,
    EXACT_COLORING_MAX_NODES,
    HO_CONSECUTIVE_REPORTS,
    HO_HYSTERESIS_DB,
)
from .controller import (
    AppTrigger,
    AssociationIntent,
    ChannelIntent,
    Intent,
    NetworkView,
    PolicyIntent,
    RuleRecord,
    SteerIntent,
    TriggerKind,
    UeView,
)
from .domain import MgmtPolicy, NodeId, UeState

logger = logging.getLogger(__name__)


class AppError(Exception):
    """Base class for control-app errors."""


class NoCandidate(AppError):
    pass


class UnknownParameter(AppError):
    pass


@dataclass(frozen=True)
class HandoverPolicy:
    hysteresis_db: float = HO_HYSTERESIS_DB
    consecutive_reports: int = HO_CONSECUTIVE_REPORTS

    def __post_init__(self):
        if not self.hysteresis_db > 0:
            raise ValueError(f"hysteresis_db must be positive, got {self.hysteresis_db}")
        if self.consecutive_reports < 1:
            raise ValueError(f"consecutive_reports must be >= 1, got {self.consecutive_reports}")


class Candidate(NamedTuple):
    ap: NodeId
    rssi_dbm: float
    load: int


def lb_select_ap(candidates: Iterable[Candidate]) -> NodeId:
    """
    Least-loaded AP; ties go to the stronger RSSI, then the lowest AP index.

    Raises:
        NoCandidate: When the candidate list is empty.
    """
    candidates = list(candidates)
    if not candidates:
        raise NoCandidate("no AP candidates")
    best = min(candidates, key=lambda c: (c.load, -c.rssi_dbm, c.ap.index))
    return best.ap


def admission_policy_update(
    view: NetworkView,
    threshold: int = ADMISSION_THRESHOLD,
    hysteresis: int = ADMISSION_HYSTERESIS,
) -> list[tuple[NodeId, MgmtPolicy]]:
    """Probe-suppression changes: suppress at load >= threshold, clear below threshold - hysteresis."""
    updates = []
    for ap in sorted(view.aps):
        ap_view = view.aps[ap]
        policy = ap_view.mgmt_policy
        suppressed = policy.suppress_probe_above_load is not None
        if not suppressed and ap_view.load >= threshold:
            updates.append((ap, replace(policy, suppress_probe_above_load=threshold)))
        elif suppressed and ap_view.load < threshold - hysteresis:
            updates.append((ap, replace(policy, suppress_probe_above_load=None)))
    return updates


def ho_decide(policy: HandoverPolicy, ue: UeView) -> NodeId | None:
    """
    Handover target for a session-active UE, or None.

    The candidate is the strongest non-serving AP in the latest report; it must
    beat the serving AP by more than the hysteresis in each of the last
    `consecutive_reports` reports. An AP missing from a report counts as unheard.
    """
    k = policy.consecutive_reports
    if ue.state is not UeState.SESSION_ACTIVE or ue.serving_ap is None or len(ue.rssi_history) < k:
        return None
    latest = ue.rssi_history[-1].rssi_dbm
    others = [ap for ap in latest if ap != ue.serving_ap]
    if not others:
        return None
    candidate = max(others, key=lambda ap: (latest[ap], -ap.index))
    for report in list(ue.rssi_history)[-k:]:
        serving = report.rssi_dbm.get(ue.serving_ap, float("-inf"))
        heard = report.rssi_dbm.get(candidate, float("-inf"))
        if not heard > serving + policy.hysteresis_db:
            return None
    return candidate


def count_conflicts(graph: nx.Graph, assignment: dict[NodeId, int]) -> int:
    return sum(1 for a, b in graph.edges if assignment[a] == assignment[b])


def _exact_assignment(graph: nx.Graph, channels: tuple[int, ...], current: dict[NodeId, int]) -> dict[NodeId, int]:
    nodes = sorted(graph.nodes)
    edges = [(nodes.index(a), nodes.index(b)) for a, b in graph.edges]
    best_key = None
    best = None
    for combo in itertools.product(channels, repeat=len(nodes)):
        conflicts = sum(1 for i, j in edges if combo[i] == combo[j])
        changes = sum(1 for node, ch in zip(nodes, combo) if current[node] != ch)
        key = (conflicts, changes, combo)
        if best_key is None or key < best_key:
            best_key, best = key, combo
    return dict(zip(nodes, best))


def _dsatur_assignment(graph: nx.Graph, channels: tuple[int, ...], current: dict[NodeId, int]) -> dict[NodeId, int]:
    assignment: dict[NodeId, int] = {}
    uncolored = set(graph.nodes)

    def saturation(node):
        return len({assignment[n] for n in graph.neighbors(node) if n in assignment})

    while uncolored:
        node = max(uncolored, key=lambda n: (saturation(n), graph.degree(n), -n.index))
        used = [assignment[n] for n in graph.neighbors(node) if n in assignment]
        assignment[node] = min(
            channels,
            key=lambda ch: (used.count(ch), ch != current[node], ch),
        )
        uncolored.remove(node)
    return assignment


def assign_channels(
    graph: nx.Graph,
    channels: Iterable[int] = CHANNELS,
    current: dict[NodeId, int] | None = None,
) -> dict[NodeId, int]:
    """
    Conflict-minimizing channel assignment.

    Graphs up to 10 nodes are searched exhaustively, preferring fewer changes
    from `current` among optimal assignments. Larger graphs use DSATUR-style
    greedy colouring. Never returns more conflicts than `current`.
    """
    channels = tuple(sorted(channels))
    current = dict(current or {})
    for node in graph.nodes:
        current.setdefault(node, channels[0])
    if graph.number_of_nodes() == 0:
        return {}
    if graph.number_of_nodes() <= EXACT_COLORING_MAX_NODES:
        proposed = _exact_assignment(graph, channels, current)
    else:
        proposed = _dsatur_assignment(graph, channels, current)
    baseline = {node: current[node] for node in graph.nodes}
    if count_conflicts(graph, proposed) >= count_conflicts(graph, baseline):
        return baseline
    return proposed


def channel_intents(current: dict[NodeId, int], assignment: dict[NodeId, int]) -> list[ChannelIntent]:
    return [ChannelIntent(ap, ch) for ap, ch in sorted(assignment.items()) if current.get(ap) != ch]


def view_conflict_graph(view: NetworkView) -> nx.Graph:
    graph = nx.Graph()
    graph.add_nodes_from(view.aps)
    for ap, ap_view in view.aps.items():
        graph.add_edges_from((ap, n) for n in ap_view.neighbors if n != ap and n in view.aps)
    return graph


class LoadBalancingApp:
    """Steers each newly arriving UE to the least-loaded AP that hears it."""

    name = "load_balancing"

    def __init__(self, threshold_dbm: float = ASSOC_THRESHOLD_DBM):
        self.threshold_dbm = threshold_dbm
        self._inflight: dict[NodeId, NodeId] = {}
        self.failures = 0

    def on_trigger(self, view: NetworkView, trigger: AppTrigger) -> list[Intent]:
        if trigger.kind is not TriggerKind.RSSI_UPDATED:
            return []
        for ue in [ue for ue in self._inflight if view.ues.get(ue) and view.ues[ue].serving_ap is not None]:
            del self._inflight[ue]
        ue_view = view.ues.get(trigger.node)
        if ue_view is None or ue_view.serving_ap is not None or ue_view.steered_to is not None:
            return []
        if not ue_view.rssi_history:
            return []
        candidates = [
            Candidate(ap, dbm, view.aps[ap].load + sum(1 for t in self._inflight.values() if t == ap))
            for ap, dbm in ue_view.rssi_history[-1].rssi_dbm.items()
            if dbm >= self.threshold_dbm
        ]
        if not candidates:
            return []
        target = lb_select_ap(candidates)
        self._inflight[ue_view.ue] = target
        return [AssociationIntent(ue_view.ue, target)]

    def on_rule_failed(self, record: RuleRecord) -> None:
        self.failures += 1

    def set_param(self, key: str, value) -> None:
        if key != "threshold_dbm":
            raise UnknownParameter(f"{self.name}: {key}")
        self.threshold_dbm = float(value)


class AdmissionControlApp:
    """Suppresses probe responses on loaded APs."""

    name = "admission"

    def __init__(self, threshold: int = ADMISSION_THRESHOLD, hysteresis: int = ADMISSION_HYSTERESIS):
        self.threshold = threshold
        self.hysteresis = hysteresis
        self._requested: dict[NodeId, MgmtPolicy] = {}
        self.failures = 0

    def on_trigger(self, view: NetworkView, trigger: AppTrigger) -> list[Intent]:
        if trigger.kind is not TriggerKind.LOAD_UPDATED:
            return []
        intents = []
        for ap, policy in admission_policy_update(view, self.threshold, self.hysteresis):
            if trigger.node is not None and ap != trigger.node:
                continue
            if self._requested.get(ap) == policy:
                continue
            self._requested[ap] = policy
            intents.append(PolicyIntent(ap, policy))
        return intents

    def on_rule_failed(self, record: RuleRecord) -> None:
        self.failures += 1

    def set_param(self, key: str, value) -> None:
        if key not in ("threshold", "hysteresis"):
            raise UnknownParameter(f"{self.name}: {key}")
        setattr(self, key, int(value))


class MobilityApp:
    """Triggers handovers with hysteresis and persistence."""

    name = "mobility"

    def __init__(self, policy: HandoverPolicy | None = None):
        self.policy = policy or HandoverPolicy()
        self.failures = 0

    def on_trigger(self, view: NetworkView, trigger: AppTrigger) -> list[Intent]:
        if trigger.kind is not TriggerKind.RSSI_UPDATED:
            return []
        ue_view = view.ues.get(trigger.node)
        if ue_view is None:
            return []
        target = ho_decide(self.policy, ue_view)
        if target is None or target not in view.aps:
            return []
        return [SteerIntent(ue_view.ue, target)]

    def on_rule_failed(self, record: RuleRecord) -> None:
        self.failures += 1
        logger.warning("handover rule %d failed", record.rule.rule_id)

    def set_param(self, key: str, value) -> None:
        if key == "hysteresis_db":
            self.policy = replace(self.policy, hysteresis_db=float(value))
        elif key == "consecutive_reports":
            self.policy = replace(self.policy, consecutive_reports=int(value))
        else:
            raise UnknownParameter(f"{self.name}: {key}")


class ChannelApp:
    """Re-colours the AP conflict graph whenever interference statistics change."""

    name = "channel"

    def __init__(self, channels: Iterable[int] = CHANNELS):
        self.channels = tuple(channels)
        self._requested: dict[NodeId, int] = {}
        self.failures = 0

    def on_trigger(self, view: NetworkView, trigger: AppTrigger) -> list[Intent]:
        if trigger.kind is not TriggerKind.INTERFERENCE_UPDATED:
            return []
        current = {ap: ap_view.channel for ap, ap_view in view.aps.items()}
        for ap, ch in list(self._requested.items()):
            if current.get(ap) == ch:
                del self._requested[ap]
        effective = {ap: self._requested.get(ap, ch) for ap, ch in current.items()}
        assignment = assign_channels(view_conflict_graph(view), self.channels, effective)
        intents = channel_intents(effective, assignment)
        for intent in intents:
            self._requested[intent.ap] = intent.channel
        return intents

    def on_rule_failed(self, record: RuleRecord) -> None:
        self.failures += 1

    def set_param(self, key: str, value) -> None:
        if key != "channels":
            raise UnknownParameter(f"{self.name}: {key}")
        self.channels = tuple(int(ch) for ch in value)


APP_TYPES = {
    LoadBalancingApp.name: LoadBalancingApp,
    AdmissionControlApp.name: AdmissionControlApp,
    MobilityApp.name: MobilityApp,
    ChannelApp.name: ChannelApp,
}


def build_app(name: str, params: dict | None = None):
    """Instantiate an app by name and apply scenario parameters."""
    try:
        app = APP_TYPES[name]()
    except KeyError:
        raise UnknownParameter(f"unknown app {name!r}") from None
    for key, value in (params or {}).items():
        app.set_param(key, value)
    return app
