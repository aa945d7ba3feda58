"""Packet arrival generators: constant bit rate and exponential on/off."""

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterator

import numpy as np

from .domain import Direction

MIN_PKT_BYTES = 64
MAX_PKT_BYTES = 1500


class TrafficError(Exception):
    """Base class for traffic generation errors."""


class BadSpec(TrafficError):
    pass


class TrafficKind(str, Enum):
    CBR = "CBR"
    ONOFF = "ONOFF"


@dataclass(frozen=True)
class TrafficSpec:
    """
    One UE flow's offered load.

    For ONOFF, `rate_mbps` is the peak rate during on periods; the long-run
    average is rate × mean_on / (mean_on + mean_off).
    """

    kind: TrafficKind = TrafficKind.CBR
    rate_mbps: float = 1.0
    pkt_bytes: int = 1500
    start_us: int = 0
    stop_us: int | None = None
    mean_on_us: int = 100_000
    mean_off_us: int = 100_000
    direction: Direction = Direction.UP
    traffic_class: str = "default"

    def scaled(self, factor: float) -> "TrafficSpec | None":
        """Rate multiplied by `factor`; None when the flow vanishes (factor 0)."""
        if factor <= 0:
            return None
        return TrafficSpec(
            self.kind,
            self.rate_mbps * factor,
            self.pkt_bytes,
            self.start_us,
            self.stop_us,
            self.mean_on_us,
            self.mean_off_us,
            self.direction,
            self.traffic_class,
        )

    @property
    def mean_rate_mbps(self) -> float:
        if self.kind is TrafficKind.CBR:
            return self.rate_mbps
        return self.rate_mbps * self.mean_on_us / (self.mean_on_us + self.mean_off_us)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "rate_mbps": self.rate_mbps,
            "pkt_bytes": self.pkt_bytes,
            "start_us": self.start_us,
            "stop_us": self.stop_us,
            "mean_on_us": self.mean_on_us,
            "mean_off_us": self.mean_off_us,
            "direction": self.direction.value,
            "traffic_class": self.traffic_class,
        }


def validate_spec(spec: TrafficSpec) -> None:
    """
    Raises:
        BadSpec: On a non-positive rate, packet size outside 64..1500 bytes,
            a negative start, a stop before start or non-positive on/off means.
    """
    if not (isinstance(spec.rate_mbps, (int, float)) and math.isfinite(spec.rate_mbps) and spec.rate_mbps > 0):
        raise BadSpec(f"rate_mbps must be positive, got {spec.rate_mbps}")
    if not MIN_PKT_BYTES <= spec.pkt_bytes <= MAX_PKT_BYTES:
        raise BadSpec(f"pkt_bytes must be within {MIN_PKT_BYTES}..{MAX_PKT_BYTES}, got {spec.pkt_bytes}")
    if spec.start_us < 0:
        raise BadSpec("start_us must be non-negative")
    if spec.stop_us is not None and spec.stop_us < spec.start_us:
        raise BadSpec("stop_us precedes start_us")
    if spec.kind is TrafficKind.ONOFF and (spec.mean_on_us <= 0 or spec.mean_off_us <= 0):
        raise BadSpec("ONOFF needs positive mean_on_us and mean_off_us")


def interval_us(spec: TrafficSpec) -> Fraction:
    """Exact CBR inter-arrival time in microseconds."""
    return Fraction(spec.pkt_bytes * 8) / Fraction(str(spec.rate_mbps))


def _cbr(spec: TrafficSpec, horizon_us: int) -> Iterator[int]:
    step = interval_us(spec)
    k = 1
    while True:
        t = spec.start_us + math.floor(k * step)
        if t > horizon_us:
            return
        yield t
        k += 1


def _onoff(spec: TrafficSpec, rng: np.random.Generator, horizon_us: int) -> Iterator[int]:
    step = interval_us(spec)
    period_start = spec.start_us
    while period_start <= horizon_us:
        on_us = rng.exponential(spec.mean_on_us)
        off_us = rng.exponential(spec.mean_off_us)
        on_end = period_start + on_us
        k = 1
        while True:
            t = period_start + k * step
            if t > on_end:
                break
            arrival = math.floor(t)
            if arrival > horizon_us:
                return
            yield arrival
            k += 1
        period_start = math.floor(on_end + off_us)


def gen_traffic(spec: TrafficSpec, rng: np.random.Generator | None = None, horizon_us: int | None = None) -> Iterator[int]:
    """
    Generate packet arrival times (µs) for a flow.

    `spec` is validated before the generator is returned. Arrivals stop at
    `stop_us` (or `horizon_us` when it has no stop).

    Raises:
        BadSpec: Invalid spec, or ONOFF without an rng.
    """
    validate_spec(spec)
    stop = spec.stop_us if spec.stop_us is not None else horizon_us
    if stop is None:
        raise BadSpec("either stop_us or horizon_us is required")
    if horizon_us is not None:
        stop = min(stop, horizon_us)
    if spec.kind is TrafficKind.CBR:
        return _cbr(spec, stop)
    if rng is None:
        raise BadSpec("ONOFF traffic needs a seeded rng")
    return _onoff(spec, rng, stop)
