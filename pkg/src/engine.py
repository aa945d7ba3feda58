"""Discrete-event core: integer-microsecond clock, links, packets, trace digest and PRNG streams."""

import hashlib
import json
import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Callable

import numpy as np
import simpy

from .config import IPSEC_OVERHEAD_BYTES, QUEUE_CAP_PACKETS
from .domain import Direction, NodeId

logger = logging.getLogger(__name__)


class SimulationError(Exception):
    """Base class for simulation errors."""


class InvariantViolation(SimulationError):
    """A runtime invariant check failed."""


class PacketClass(str, Enum):
    DATA = "DATA"
    CMI = "CMI"
    NAS = "NAS"
    MGMT = "MGMT"
    N3 = "N3"


@dataclass(eq=False)
class Packet:
    pkt_class: PacketClass
    src: NodeId
    dst: NodeId
    size_bytes: int
    created_us: int
    seq_no: int = 0
    flow: tuple[int, str] | None = None
    direction: Direction | None = None
    payload: Any = None
    ipsec: bool = False
    tunnel_id: int | None = None
    delivered_us: int | None = None
    slice_id: str | None = None

    @property
    def wire_bytes(self) -> int:
        return self.size_bytes + (IPSEC_OVERHEAD_BYTES if self.ipsec else 0)


class Stream(IntEnum):
    """Independent PRNG streams derived from the scenario seed."""

    TRAFFIC = 1
    NONCE = 2
    MOBILITY = 3


def make_rng(seed: int, stream: Stream, index: int = 0) -> np.random.Generator:
    """PCG64 generator for one stochastic component, keyed by (seed, stream, index)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(stream), index)))


class Simulator:
    """
    Wraps a simpy environment with an integer-microsecond clock.

    Events at equal times run in scheduling order, so execution order is a
    pure function of the inputs. Every traced event folds into a 64-bit digest.
    """

    def __init__(self, seed: int = 0, keep_trace: bool = False):
        self.env = simpy.Environment()
        self.seed = seed
        self._digest = hashlib.blake2b(digest_size=8)
        self.trace_events = 0
        self.trace_lines: list[dict] | None = [] if keep_trace else None
        self.checks: list[Callable[[], None]] = []

    @property
    def now(self) -> int:
        return int(self.env.now)

    def schedule(self, delay_us: int, fn: Callable, *args) -> None:
        if delay_us < 0:
            raise SimulationError(f"cannot schedule {delay_us} us in the past")
        event = self.env.timeout(int(delay_us))
        event.callbacks.append(lambda _event: self._fire(fn, args))

    def at(self, time_us: int, fn: Callable, *args) -> None:
        self.schedule(max(0, int(time_us) - self.now), fn, *args)

    def _fire(self, fn: Callable, args: tuple) -> None:
        fn(*args)
        for check in self.checks:
            check()

    def rng(self, stream: Stream, index: int = 0) -> np.random.Generator:
        return make_rng(self.seed, stream, index)

    def trace(self, node: object, kind: str, detail: str = "") -> None:
        self.trace_events += 1
        self._digest.update(f"{self.now}|{node}|{kind}|{detail}\n".encode("utf-8"))
        if self.trace_lines is not None:
            self.trace_lines.append({"time_us": self.now, "node": str(node), "event_kind": kind, "detail": detail})

    @property
    def digest(self) -> str:
        return self._digest.hexdigest()

    def run(self, until_us: int) -> None:
        self.env.run(until=until_us)

    def dump_trace(self, path: Path, header: dict) -> None:
        """Write the trace as JSON lines, preceded by a header record."""
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({**header, "digest": self.digest}, sort_keys=True) + "\n")
            for line in self.trace_lines or ():
                f.write(json.dumps(line, sort_keys=True) + "\n")


@dataclass
class ClassStats:
    enqueued: int = 0
    delivered: int = 0
    dropped: int = 0
    bytes_delivered: int = 0


class Link:
    """
    One direction of a point-to-point link: drop-tail FIFO plus serialization and propagation.

    Queue occupancy counts packets not yet fully serialized, the one on the
    wire included.
    """

    def __init__(
        self,
        sim: Simulator,
        name: str,
        src: NodeId,
        dst: NodeId,
        capacity_mbps: float,
        prop_delay_us: int,
        queue_cap: int = QUEUE_CAP_PACKETS,
    ):
        if capacity_mbps <= 0:
            raise SimulationError(f"link {name}: capacity must be positive")
        self.sim = sim
        self.name = name
        self.src = src
        self.dst = dst
        self.capacity_bps = round(capacity_mbps * 1_000_000)
        self.prop_delay_us = int(prop_delay_us)
        self.queue_cap = queue_cap
        self._departures: deque[int] = deque()
        self._busy_until = 0
        self.stats: dict[PacketClass, ClassStats] = {c: ClassStats() for c in PacketClass}
        self.in_flight = 0

    def serialization_us(self, size_bytes: int) -> int:
        bits = size_bytes * 8
        return -(-bits * 1_000_000 // self.capacity_bps)

    def backlog(self) -> int:
        now = self.sim.now
        while self._departures and self._departures[0] <= now:
            self._departures.popleft()
        return len(self._departures)

    @property
    def busy_until(self) -> int:
        return self._busy_until

    def transmit(self, pkt: Packet, deliver: Callable[[Packet], None]) -> bool:
        """Enqueue a packet; False when it was dropped at a full queue."""
        stats = self.stats[pkt.pkt_class]
        stats.enqueued += 1
        if self.backlog() >= self.queue_cap:
            stats.dropped += 1
            self.sim.trace(self.name, "drop", f"{pkt.pkt_class.value}:{pkt.seq_no}")
            return False
        now = self.sim.now
        start = max(now, self._busy_until)
        done = start + self.serialization_us(pkt.wire_bytes)
        self._busy_until = done
        self._departures.append(done)
        self.in_flight += 1
        self.sim.schedule(done + self.prop_delay_us - now, self._arrive, pkt, deliver)
        return True

    def _arrive(self, pkt: Packet, deliver: Callable[[Packet], None]) -> None:
        self.in_flight -= 1
        stats = self.stats[pkt.pkt_class]
        stats.delivered += 1
        stats.bytes_delivered += pkt.wire_bytes
        deliver(pkt)

    def class_bytes(self, pkt_class: PacketClass) -> int:
        return self.stats[pkt_class].bytes_delivered

    def summary(self) -> dict:
        return {
            c.value: {
                "enqueued": s.enqueued,
                "delivered": s.delivered,
                "dropped": s.dropped,
                "bytes": s.bytes_delivered,
            }
            for c, s in self.stats.items()
        }


@dataclass
class LinkPair:
    """Both directions of a physical link."""

    name: str
    up: Link
    down: Link

    def summary(self) -> dict:
        up, down = self.up.summary(), self.down.summary()
        return {
            cls: {key: up[cls][key] + down[cls][key] for key in up[cls]}
            for cls in up
        }

    def class_bytes(self, pkt_class: PacketClass) -> int:
        return self.up.class_bytes(pkt_class) + self.down.class_bytes(pkt_class)

    @property
    def in_flight(self) -> int:
        return self.up.in_flight + self.down.in_flight
