"""Slice scheduler for the WAE's N3 egress: deficit round robin over slices, token buckets per flow."""

import logging
import math
from collections import Counter, deque
from dataclasses import dataclass
from typing import Any, Hashable

from .config import BUCKET_DEPTH_BYTES, DRR_MTU_BYTES, QUEUE_CAP_PACKETS
from .domain import SliceTemplate

logger = logging.getLogger(__name__)


class TokenBucket:
    """Byte-granular token bucket driven by the simulated clock."""

    def __init__(self, rate_mbps: float, depth_bytes: float = BUCKET_DEPTH_BYTES, now_us: int = 0):
        self.rate_mbps = rate_mbps
        self.depth_bytes = depth_bytes
        self._tokens = float(depth_bytes)
        self._ts = now_us

    @property
    def bytes_per_us(self) -> float:
        return self.rate_mbps / 8

    def _refill(self, now_us: int) -> None:
        if now_us > self._ts:
            self._tokens = min(self.depth_bytes, self._tokens + (now_us - self._ts) * self.bytes_per_us)
            self._ts = now_us

    def tokens(self, now_us: int) -> float:
        self._refill(now_us)
        return self._tokens

    def conforms(self, size_bytes: int, now_us: int) -> bool:
        return self.tokens(now_us) >= min(size_bytes, self.depth_bytes)

    def consume(self, size_bytes: int, now_us: int) -> bool:
        """Take tokens for a packet; False (and nothing taken) if it does not conform."""
        if not self.conforms(size_bytes, now_us):
            return False
        self._tokens -= size_bytes
        return True

    def ready_at(self, size_bytes: int, now_us: int) -> int:
        """Earliest time the packet will conform."""
        missing = min(size_bytes, self.depth_bytes) - self.tokens(now_us)
        if missing <= 0:
            return now_us
        return now_us + math.ceil(missing / self.bytes_per_us)

    def set_rate(self, rate_mbps: float, now_us: int) -> None:
        self._refill(now_us)
        self.rate_mbps = rate_mbps


@dataclass
class _Entry:
    item: Any
    size: int
    flow: Hashable


class SliceScheduler:
    """
    Weighted DRR across slice queues (quantum = weight x 1500 B) with
    drop-tail queues of 100 packets and a token bucket per flow.

    The caller pulls: `dequeue(now)` returns the next conforming packet, or
    (None, wake_at) when every backlogged head is rate-limited.
    """

    def __init__(self, queue_cap: int = QUEUE_CAP_PACKETS, mtu_bytes: int = DRR_MTU_BYTES):
        self.queue_cap = queue_cap
        self.mtu_bytes = mtu_bytes
        self.weights: dict[str, int] = {}
        self._queues: dict[str, deque[_Entry]] = {}
        self._deficit: dict[str, int] = {}
        self._granted: dict[str, bool] = {}
        self._active: deque[str] = deque()
        self._buckets: dict[Hashable, TokenBucket] = {}
        self.sent_bytes: Counter[str] = Counter()
        self.dropped: Counter[str] = Counter()

    def configure_slice(self, template: SliceTemplate) -> None:
        self.weights[template.slice_id] = template.weight
        self._queues.setdefault(template.slice_id, deque())
        self._deficit.setdefault(template.slice_id, 0)
        self._granted.setdefault(template.slice_id, False)

    def remove_slice(self, slice_id: str) -> int:
        """Drop a slice and its backlog; returns the number of packets discarded."""
        queue = self._queues.pop(slice_id, deque())
        self.weights.pop(slice_id, None)
        self._deficit.pop(slice_id, None)
        self._granted.pop(slice_id, None)
        if slice_id in self._active:
            self._active.remove(slice_id)
        self.dropped[slice_id] += len(queue)
        return len(queue)

    def has_slice(self, slice_id: str) -> bool:
        return slice_id in self._queues

    def set_flow_rate(self, flow: Hashable, rate_mbps: float, now_us: int) -> None:
        bucket = self._buckets.get(flow)
        if bucket is None:
            self._buckets[flow] = TokenBucket(rate_mbps, now_us=now_us)
        elif bucket.rate_mbps != rate_mbps:
            bucket.set_rate(rate_mbps, now_us)

    def remove_flow(self, flow: Hashable) -> int:
        """Forget a flow's bucket and purge its queued packets; returns how many were discarded."""
        self._buckets.pop(flow, None)
        discarded = 0
        for slice_id, queue in self._queues.items():
            kept = deque(e for e in queue if e.flow != flow)
            purged = len(queue) - len(kept)
            if not purged:
                continue
            discarded += purged
            self.dropped[slice_id] += purged
            self._queues[slice_id] = kept
            if not kept:
                if slice_id in self._active:
                    self._active.remove(slice_id)
                self._deficit[slice_id] = 0
                self._granted[slice_id] = False
        return discarded

    def backlog(self, slice_id: str | None = None) -> int:
        if slice_id is not None:
            return len(self._queues.get(slice_id, ()))
        return sum(len(q) for q in self._queues.values())

    def enqueue(self, slice_id: str, item: Any, size: int, flow: Hashable, rate_mbps: float, now_us: int) -> bool:
        """Queue a packet; False when the slice is unknown or its queue is full (drop-tail)."""
        queue = self._queues.get(slice_id)
        if queue is None or len(queue) >= self.queue_cap:
            self.dropped[slice_id] += 1
            return False
        self.set_flow_rate(flow, rate_mbps, now_us)
        queue.append(_Entry(item, size, flow))
        if len(queue) == 1:
            self._active.append(slice_id)
        return True

    def _quantum(self, slice_id: str) -> int:
        return self.weights[slice_id] * self.mtu_bytes

    def dequeue(self, now_us: int) -> tuple[Any | None, int | None]:
        wake_at: int | None = None
        for _ in range(4 * len(self._active) + 1):
            if not self._active:
                break
            slice_id = self._active[0]
            queue = self._queues[slice_id]
            head = queue[0]
            bucket = self._buckets[head.flow]
            if not bucket.conforms(head.size, now_us):
                ready = bucket.ready_at(head.size, now_us)
                wake_at = ready if wake_at is None else min(wake_at, ready)
                self._deficit[slice_id] = 0
                self._granted[slice_id] = False
                self._active.rotate(-1)
                continue
            if not self._granted[slice_id]:
                self._deficit[slice_id] += self._quantum(slice_id)
                self._granted[slice_id] = True
            if self._deficit[slice_id] >= head.size:
                self._deficit[slice_id] -= head.size
                queue.popleft()
                bucket.consume(head.size, now_us)
                self.sent_bytes[slice_id] += head.size
                if not queue:
                    self._active.popleft()
                    self._deficit[slice_id] = 0
                    self._granted[slice_id] = False
                return head.item, None
            self._granted[slice_id] = False
            self._active.rotate(-1)
        return None, wake_at
