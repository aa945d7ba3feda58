"""Log-distance radio model and AP conflict-graph construction."""

import math
from dataclasses import dataclass

import networkx as nx

from .config import ASSOC_THRESHOLD_DBM, D0_M, PATH_LOSS_EXPONENT, PL0_DB
from .domain import ApState, NodeId


@dataclass(frozen=True)
class RadioModel:
    pl0_db: float = PL0_DB
    d0_m: float = D0_M
    exponent: float = PATH_LOSS_EXPONENT
    threshold_dbm: float = ASSOC_THRESHOLD_DBM

    def path_loss(self, distance_m: float) -> float:
        return self.pl0_db + 10 * self.exponent * math.log10(max(distance_m, self.d0_m) / self.d0_m)

    def rssi(self, tx_power_dbm: float, a: tuple[float, float], b: tuple[float, float]) -> float:
        return tx_power_dbm - self.path_loss(math.dist(a, b))

    def audible(self, rssi_dbm: float) -> bool:
        return rssi_dbm >= self.threshold_dbm


DEFAULT_RADIO = RadioModel()


def build_conflict_graph(aps: list[ApState], radio: RadioModel = DEFAULT_RADIO) -> nx.Graph:
    """
    Connect every pair of APs that hear each other above the association threshold.

    The edge is added when the stronger of the two directions clears the
    threshold, so unequal transmit powers still produce a symmetric graph.
    """
    graph = nx.Graph()
    graph.add_nodes_from(ap.ap for ap in aps)
    for i, a in enumerate(aps):
        for b in aps[i + 1:]:
            heard = max(
                radio.rssi(a.tx_power_dbm, a.position, b.position),
                radio.rssi(b.tx_power_dbm, b.position, a.position),
            )
            if radio.audible(heard):
                graph.add_edge(a.ap, b.ap)
    return graph


def neighbors_of(graph: nx.Graph, ap: NodeId) -> frozenset[NodeId]:
    return frozenset(graph.neighbors(ap)) if ap in graph else frozenset()
