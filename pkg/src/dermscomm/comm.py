"""Categorized message channels with packet-loss, link-failure and delay faults."""

from __future__ import annotations

import enum
import heapq
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Union

import numpy as np

from .controller import DirectionSignal, GridMeasurement, PQMeasurement, Setpoint


class Category(enum.Enum):
    """Channel category; ``group`` is the information-flow tier (1, 2 or 3)."""

    VOLTAGE = "voltage"
    FEEDER_HEAD = "feeder_head"
    DIRECTION = "direction"
    SETPOINT = "setpoint"
    PQ_MEASUREMENT = "pq_measurement"

    @property
    def group(self) -> int:
        return {"voltage": 1, "feeder_head": 1, "direction": 2, "setpoint": 3, "pq_measurement": 3}[self.value]


GROUP_NAMES = {"grid_service": 1, "direction_signal": 2, "der_link": 3}

SUBCATEGORY_NAMES = {
    "voltage": Category.VOLTAGE,
    "feeder_head": Category.FEEDER_HEAD,
    "setpoint": Category.SETPOINT,
    "measurement": Category.PQ_MEASUREMENT,
    "pq_measurement": Category.PQ_MEASUREMENT,
}


def resolve_categories(category: str, subcategory: str | None = None) -> frozenset[Category]:
    """Map a config ``category``/``subcategory`` pair to channel categories.

    ``category`` may be a tier name (grid_service, direction_signal,
    der_link) or directly one of the five channel categories.
    """
    if category in GROUP_NAMES:
        cats = {c for c in Category if c.group == GROUP_NAMES[category]}
        if subcategory is None:
            return frozenset(cats)
        sub = SUBCATEGORY_NAMES.get(subcategory)
        if sub is None or sub not in cats:
            raise ValueError(f"subcategory {subcategory!r} does not belong to {category!r}")
        return frozenset({sub})
    try:
        return frozenset({Category(category)})
    except ValueError:
        raise ValueError(f"unknown channel category {category!r}") from None


@dataclass(frozen=True)
class PacketLoss:
    p_drop: float

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must lie in [0, 1]")


@dataclass(frozen=True)
class LinkFailure:
    p_fail: float
    downtime: float

    def __post_init__(self):
        if not 0.0 <= self.p_fail <= 1.0:
            raise ValueError("p_fail must lie in [0, 1]")
        if self.downtime < 0:
            raise ValueError("downtime must be nonnegative")


@dataclass(frozen=True)
class Delay:
    latency: float

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError("latency must be nonnegative")


FaultModel = Union[PacketLoss, LinkFailure, Delay, None]


def channel_rng(master_seed: int, channel_id: str) -> np.random.Generator:
    """Counter-based stream keyed by (master seed, channel id)."""
    key = zlib.crc32(channel_id.encode())
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([master_seed, key])))


def _payload_ok(category: Category, payload: Any) -> bool:
    if category is Category.VOLTAGE:
        return isinstance(payload, GridMeasurement) and payload.kind == "voltage"
    if category is Category.FEEDER_HEAD:
        return isinstance(payload, GridMeasurement) and payload.kind == "feeder_head"
    if category is Category.DIRECTION:
        if isinstance(payload, tuple):
            return len(payload) > 0 and all(isinstance(s, DirectionSignal) for s in payload)
        return isinstance(payload, DirectionSignal)
    if category is Category.SETPOINT:
        return isinstance(payload, Setpoint)
    return isinstance(payload, PQMeasurement)


@dataclass(eq=False)
class Channel:
    id: str
    category: Category
    source: str
    destination: str
    fault: FaultModel = None
    seed: int = 0
    down_until: float = -math.inf
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = channel_rng(self.seed, self.id)

    def is_down(self, now: float) -> bool:
        return now < self.down_until


@dataclass(eq=False)
class Message:
    channel_id: str
    payload: Any
    created_at: float
    deliver_at: float
    seq: int
    delivered: bool = False


def send(channel: Channel, payload: Any, now: float) -> float | None:
    """Apply the channel's fault model; return the delivery time or None if dropped."""
    if not _payload_ok(channel.category, payload):
        raise ValueError(f"payload {type(payload).__name__} does not match channel category {channel.category.value}")
    fault = channel.fault
    if fault is None:
        return now
    if isinstance(fault, PacketLoss):
        if fault.p_drop >= 1.0:
            return None
        if fault.p_drop > 0.0 and channel.rng.random() < fault.p_drop:
            return None
        return now
    if isinstance(fault, LinkFailure):
        if channel.is_down(now):
            return None
        if fault.p_fail > 0.0 and channel.rng.random() < fault.p_fail:
            channel.down_until = now + fault.downtime
        return now
    if isinstance(fault, Delay):
        return now + fault.latency
    raise TypeError(f"unsupported fault model {fault!r}")


class MessageQueue:
    """In-flight messages ordered by (deliver_at, send sequence)."""

    def __init__(self):
        self._heap: list[tuple[float, int, Message]] = []
        self._seq = 0

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, channel_id: str, payload: Any, created_at: float, deliver_at: float) -> Message:
        if deliver_at < created_at:
            raise ValueError("deliver_at precedes created_at")
        msg = Message(channel_id, payload, created_at, deliver_at, self._seq)
        self._seq += 1
        heapq.heappush(self._heap, (deliver_at, msg.seq, msg))
        return msg

    def pending(self) -> list[Message]:
        return [m for _, _, m in sorted(self._heap, key=lambda e: (e[0], e[1]))]

    def deliver_due(self, now: float) -> list[Message]:
        out = []
        heap = self._heap
        while heap and heap[0][0] <= now:
            msg = heapq.heappop(heap)[2]
            msg.delivered = True
            out.append(msg)
        return out


def deliver_due(queue: MessageQueue, now: float) -> list[Message]:
    return queue.deliver_due(now)


def select_faulty_channels(channel_ids: Iterable[str], fraction: float, seed: int) -> list[str]:
    """Uniform random subset of round-half-up(fraction * count) channel ids."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    ids = sorted(channel_ids)
    k = int(math.floor(fraction * len(ids) + 0.5))
    if k == 0:
        return []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E1EC7]))
    picked = rng.choice(len(ids), size=k, replace=False)
    return sorted(ids[i] for i in picked)


class Transport:
    """Owns the channels and the in-flight queue of one simulation run."""

    def __init__(self):
        self.channels: dict[str, Channel] = {}
        self.queue = MessageQueue()
        self.sent: Counter = Counter()
        self.dropped: Counter = Counter()
        self.delivered: Counter = Counter()

    def add(self, channel: Channel) -> Channel:
        if channel.id in self.channels:
            raise ValueError(f"duplicate channel id {channel.id}")
        self.channels[channel.id] = channel
        return channel

    def by_category(self, category: Category) -> list[Channel]:
        return [c for c in self.channels.values() if c.category is category]

    def send(self, channel_id: str, payload: Any, now: float) -> Message | None:
        ch = self.channels[channel_id]
        self.sent[ch.category] += 1
        at = send(ch, payload, now)
        if at is None:
            self.dropped[ch.category] += 1
            return None
        return self.queue.push(channel_id, payload, now, at)

    def deliver_due(self, now: float) -> list[Message]:
        msgs = self.queue.deliver_due(now)
        for m in msgs:
            self.delivered[self.channels[m.channel_id].category] += 1
        return msgs

    def totals(self) -> tuple[int, int, int]:
        return sum(self.sent.values()), sum(self.dropped.values()), sum(self.delivered.values())
