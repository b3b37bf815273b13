"""Deterministic discrete-event network simulation.

Time is simulated milliseconds. Every directed link is a FIFO store-and-forward
queue: a packet waits for the transmitter, occupies it for its transmission time
(plus bounded jitter), then arrives after the link's processing delay. FL data
packets carry an in-band telemetry header across each hop.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import math
from array import array
from collections import deque
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any, Callable, Iterator, Protocol, TextIO

import numpy as np

from .config import DEFAULT_MTU_BYTES, DEFAULT_RETRANSMIT_TIMEOUT_MS, DEFAULT_TTL_FACTOR
from .errors import ConfigError, RoutingFault, SchedulingError, TelemetryError
from .topology import LinkSpec, Topology

logger = logging.getLogger(__name__)


class EventEngine:
    """Single-threaded event loop; equal timestamps run in posting order."""

    def __init__(self, *, trace: bool = False):
        self.now = 0.0
        self.executed = 0
        self.trace: list[tuple[float, int, str]] | None = [] if trace else None
        self._queue: list[tuple[float, int, Callable[..., Any], tuple[Any, ...], str | None]] = []
        self._seq = itertools.count()
        self._stopped = False

    @property
    def pending(self) -> int:
        return len(self._queue)

    def post_event(self, t: float, callback: Callable[..., Any], *args: Any, label: str | None = None) -> None:
        if t < self.now:
            raise SchedulingError(f"Cannot post an event at {t} ms, clock is at {self.now} ms")
        heapq.heappush(self._queue, (t, next(self._seq), callback, args, label))

    def stop(self) -> None:
        self._stopped = True

    def run(self, until: float | None = None) -> int:
        """Executes events until the queue drains, `stop()` is called or `until` passes."""
        self._stopped = False
        while self._queue and not self._stopped:
            if until is not None and self._queue[0][0] > until:
                break
            t, seq, callback, args, label = heapq.heappop(self._queue)
            self.now = t
            if self.trace is not None:
                self.trace.append((t, seq, label or getattr(callback, "__qualname__", repr(callback))))
            callback(*args)
            self.executed += 1
        if until is not None and not self._stopped and self.now < until:
            self.now = until
        return self.executed


@dataclass(frozen=True, order=True)
class FlowKey:
    src: str
    dst: str

    def __post_init__(self) -> None:
        if self.src == self.dst:
            raise ValueError(f"Flow source and destination must differ ({self.src})")

    def reversed(self) -> FlowKey:
        return FlowKey(self.dst, self.src)


@dataclass(frozen=True)
class TelemetryHeader:
    sender: str
    send_timestamp: float


class PacketKind(StrEnum):
    DATA = "data"
    CONTROL = "control"
    BACKGROUND = "background"


@dataclass
class ReturnAccumulator:
    """Running sum of per-hop rewards (negative one-hop delays) for one packet."""

    value: float = 0.0

    def add(self, reward: float) -> None:
        self.value += reward


@dataclass(eq=False)
class Packet:
    id: int
    flow: FlowKey
    payload_bytes: int
    ttl: int
    kind: PacketKind = PacketKind.DATA
    created_at: float = 0.0
    message_id: int | None = None
    route: tuple[str, ...] | None = None
    telemetry: TelemetryHeader | None = None
    hop_trace: list[tuple[str, float]] = field(default_factory=list)
    hop_delays: list[float] = field(default_factory=list)
    returns: ReturnAccumulator = field(default_factory=ReturnAccumulator)

    def __post_init__(self) -> None:
        minimum = 0 if self.kind is PacketKind.CONTROL else 1
        if self.payload_bytes < minimum:
            raise ValueError(f"{self.kind} packet needs at least {minimum} payload bytes")

    @property
    def has_loop(self) -> bool:
        routers = [router for router, _ in self.hop_trace]
        return len(set(routers)) != len(routers)


def stamp_telemetry(pkt: Packet, router: str, now: float) -> Packet:
    if pkt.telemetry is not None:
        raise TelemetryError(f"Packet {pkt.id} already carries a telemetry header from {pkt.telemetry.sender}")
    pkt.telemetry = TelemetryHeader(router, now)
    return pkt


def pop_telemetry(pkt: Packet, now: float) -> tuple[float, Packet]:
    header = pkt.telemetry
    if header is None:
        raise TelemetryError(f"Packet {pkt.id} carries no telemetry header")
    delay = now - header.send_timestamp
    if delay < 0:
        raise TelemetryError(f"Packet {pkt.id} popped at {now} before it was stamped at {header.send_timestamp}")
    pkt.telemetry = None
    return delay, pkt


class Link:
    """One direction of a mesh link (LinkState)."""

    def __init__(
        self,
        src: str,
        dst: str,
        capacity_bps: float,
        proc_delay_ms: float = 0.0,
        jitter_ms: float = 0.0,
        *,
        rng: np.random.Generator | None = None,
        queue_limit: int | None = None,
    ):
        if capacity_bps <= 0:
            raise ValueError("Link capacity must be positive")
        self.src = src
        self.dst = dst
        self.capacity_bps = capacity_bps
        self.proc_delay_ms = proc_delay_ms
        self.jitter_ms = jitter_ms
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.queue_limit = queue_limit
        self.busy_until = 0.0
        self.sent = 0
        self.dropped = 0
        self._in_service: deque[float] = deque()

    @classmethod
    def from_spec(cls, src: str, dst: str, spec: LinkSpec, **kwargs: Any) -> Link:
        return cls(src, dst, spec.capacity_bps, spec.proc_delay_ms, spec.jitter_ms, **kwargs)

    def transmission_ms(self, payload_bytes: int) -> float:
        return payload_bytes * 8000.0 / self.capacity_bps

    def backlog(self, now: float) -> int:
        while self._in_service and self._in_service[0] <= now:
            self._in_service.popleft()
        return len(self._in_service)

    def transmit(self, pkt: Packet, now: float) -> float | None:
        """Enqueues `pkt` at `now` and returns its arrival instant at the far end.

        Returns None when a bounded queue is full (tail drop).
        """
        queued = self.backlog(now)
        if self.queue_limit is not None and queued >= self.queue_limit:
            self.dropped += 1
            return None
        start = max(now, self.busy_until)
        service = self.transmission_ms(pkt.payload_bytes)
        if self.jitter_ms > 0:
            service += float(self.rng.uniform(0.0, self.jitter_ms))
        self.busy_until = start + service
        self._in_service.append(self.busy_until)
        self.sent += 1
        return self.busy_until + self.proc_delay_ms


@dataclass(frozen=True)
class BackgroundFlowSpec:
    flow: FlowKey
    rate_pps: float
    packet_bytes: int = DEFAULT_MTU_BYTES
    route: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.rate_pps < 0:
            raise ConfigError(f"Background rate must be non-negative, got {self.rate_pps}")
        if self.packet_bytes <= 0:
            raise ConfigError("Background packets need a positive size")


def _arrival_offsets(rate_pps: float, rng: np.random.Generator) -> Iterator[float]:
    mean_gap_ms = 1000.0 / rate_pps
    t = 0.0
    while True:
        t += float(rng.exponential(mean_gap_ms))
        yield t


def poisson_arrivals(rate_pps: float, duration_ms: float, seed: Any) -> np.ndarray:
    """Arrival offsets (ms) that `spawn_background` injects over `duration_ms`."""
    if rate_pps <= 0:
        return np.empty(0)
    times = []
    for t in _arrival_offsets(rate_pps, np.random.default_rng(seed)):
        if t > duration_ms:
            break
        times.append(t)
    return np.asarray(times)


@dataclass(frozen=True)
class NetworkConfig:
    mtu_bytes: int = DEFAULT_MTU_BYTES
    queue_limit: int | None = None
    ttl_hops: int | None = None
    retransmit_timeout_ms: float = DEFAULT_RETRANSMIT_TIMEOUT_MS
    telemetry: bool = True
    trace_path: Path | None = None

    def __post_init__(self) -> None:
        if self.mtu_bytes <= 0:
            raise ConfigError("mtu_bytes must be positive")
        if self.queue_limit is not None and self.queue_limit < 1:
            raise ConfigError("queue_limit must be at least 1")
        if self.ttl_hops is not None and self.ttl_hops < 1:
            raise ConfigError("ttl_hops must be at least 1")


class Forwarder(Protocol):
    def next_hop(self, router: str, pkt: Packet, now: float) -> str: ...

    def on_hop(self, router: str, upstream: str, pkt: Packet, delay_ms: float, now: float) -> None: ...

    def start(self, network: Network) -> None: ...


@dataclass(eq=False)
class Message:
    """A transport-level message, fragmented into MTU-sized packets."""

    id: int
    flow: FlowKey
    nbytes: int
    sent_at: float
    fragments: int
    remaining: int
    on_delivered: Callable[[Message, float], None] | None = None
    on_failed: Callable[[Message, float], None] | None = None
    delivered_at: float | None = None
    failed_at: float | None = None

    @property
    def delay_ms(self) -> float | None:
        return None if self.delivered_at is None else self.delivered_at - self.sent_at


@dataclass
class FlowStats:
    packets: int = 0
    delay_sum: float = 0.0
    neg_return_sum: float = 0.0
    delays: array | None = None

    def record(self, delay: float, neg_return: float) -> None:
        self.packets += 1
        self.delay_sum += delay
        self.neg_return_sum += neg_return
        if self.delays is not None:
            self.delays.append(delay)


@dataclass
class NetworkStats:
    injected: int = 0
    delivered: int = 0
    dropped_ttl: int = 0
    dropped_queue: int = 0
    dropped_fault: int = 0
    failed_messages: int = 0
    retransmissions: int = 0
    loops: int = 0
    hops: int = 0
    telemetry_mismatches: int = 0
    flows: dict[FlowKey, FlowStats] = field(default_factory=dict)

    @property
    def dropped(self) -> int:
        return self.dropped_ttl + self.dropped_queue + self.dropped_fault

    def as_dict(self) -> dict[str, int]:
        return {
            "injected": self.injected,
            "delivered": self.delivered,
            "dropped_ttl": self.dropped_ttl,
            "dropped_queue": self.dropped_queue,
            "dropped_fault": self.dropped_fault,
            "failed_messages": self.failed_messages,
            "retransmissions": self.retransmissions,
            "loops": self.loops,
            "hops": self.hops,
            "telemetry_mismatches": self.telemetry_mismatches,
        }


class Network:
    """Links, forwarding, telemetry and message fragmentation over one engine."""

    def __init__(
        self,
        engine: EventEngine,
        topo: Topology,
        cfg: NetworkConfig = NetworkConfig(),
        *,
        seed: int = 0,
        forwarder: Forwarder | None = None,
        background_forwarder: Forwarder | None = None,
        abort_on_fault: bool = False,
    ):
        self.engine = engine
        self.topo = topo
        self.cfg = cfg
        self.forwarder = forwarder
        self.background_forwarder = background_forwarder
        self.abort_on_fault = abort_on_fault
        self.ttl = cfg.ttl_hops or DEFAULT_TTL_FACTOR * len(topo.routers)
        self.links: dict[tuple[str, str], Link] = {}
        for index, (a, b, spec) in enumerate(topo.directed_links()):
            rng = np.random.default_rng((seed, index))
            self.links[(a, b)] = Link.from_spec(a, b, spec, rng=rng, queue_limit=cfg.queue_limit)
        self.stats = NetworkStats()
        self.live = 0
        self.hop_observers: list[Callable[[Packet, str, str, float], None]] = []
        self._packet_ids = itertools.count(1)
        self._message_ids = itertools.count(1)
        self._messages: dict[int, Message] = {}
        self._trace: TextIO | None = None
        if cfg.trace_path is not None:
            cfg.trace_path.parent.mkdir(parents=True, exist_ok=True)
            self._trace = open(cfg.trace_path, "w", encoding="utf-8")

    def start(self) -> None:
        for forwarder in {id(f): f for f in (self.forwarder, self.background_forwarder) if f}.values():
            forwarder.start(self)

    def close(self) -> None:
        if self._trace is not None:
            self._trace.close()
            self._trace = None

    def link(self, a: str, b: str) -> Link:
        try:
            return self.links[(a, b)]
        except KeyError:
            raise RoutingFault(f"{a} has no link to {b}") from None

    # Injection

    def _new_packet(
        self,
        flow: FlowKey,
        payload_bytes: int,
        kind: PacketKind,
        message_id: int | None = None,
        route: tuple[str, ...] | None = None,
    ) -> Packet:
        return Packet(
            id=next(self._packet_ids),
            flow=flow,
            payload_bytes=payload_bytes,
            ttl=self.ttl,
            kind=kind,
            created_at=self.engine.now,
            message_id=message_id,
            route=route,
        )

    def inject(self, pkt: Packet) -> None:
        """Hands a packet to the router its source endpoint is attached to."""
        ingress = self.topo.router_of(pkt.flow.src)
        self.topo.router_of(pkt.flow.dst)
        self.stats.injected += 1
        self.live += 1
        if pkt.flow not in self.stats.flows:
            self.stats.flows[pkt.flow] = FlowStats(delays=array("d") if pkt.kind is PacketKind.DATA else None)
        self._arrive(ingress, pkt, None)

    def send_message(
        self,
        src: str,
        dst: str,
        nbytes: int,
        *,
        on_delivered: Callable[[Message, float], None] | None = None,
        on_failed: Callable[[Message, float], None] | None = None,
        kind: PacketKind = PacketKind.DATA,
    ) -> Message:
        """Fragments `nbytes` into MTU-sized packets and injects them at once.

        The message is delivered when its last fragment reaches `dst` and fails
        when a fragment is lost to a routing fault.
        """
        if nbytes < 0:
            raise ValueError("Message size must be non-negative")
        if nbytes == 0:
            sizes = [0]
            kind = PacketKind.CONTROL
        else:
            count = fragment_count(nbytes, self.cfg.mtu_bytes)
            sizes = [self.cfg.mtu_bytes] * (count - 1) + [nbytes - self.cfg.mtu_bytes * (count - 1)]
        message = Message(
            id=next(self._message_ids),
            flow=FlowKey(src, dst),
            nbytes=nbytes,
            sent_at=self.engine.now,
            fragments=len(sizes),
            remaining=len(sizes),
            on_delivered=on_delivered,
            on_failed=on_failed,
        )
        self._messages[message.id] = message
        for size in sizes:
            self.inject(self._new_packet(message.flow, size, kind, message.id))
        return message

    def spawn_background(self, spec: BackgroundFlowSpec, seed: Any, until_ms: float | None = None) -> None:
        """Injects Poisson arrivals of `spec` from now until `until_ms` (or forever)."""
        if spec.rate_pps <= 0:
            return
        if spec.route is not None:
            self._check_route(spec)
        arrivals = _arrival_offsets(spec.rate_pps, np.random.default_rng(seed))
        base = self.engine.now
        first = base + next(arrivals)
        if until_ms is None or first <= until_ms:
            self.engine.post_event(first, self._background_arrival, spec, arrivals, base, until_ms)

    def _check_route(self, spec: BackgroundFlowSpec) -> None:
        route = spec.route
        if route[0] != self.topo.router_of(spec.flow.src) or route[-1] != self.topo.router_of(spec.flow.dst):
            raise ConfigError(f"Background route {route} does not join the endpoints of {spec.flow}")
        for a, b in zip(route, route[1:]):
            if (a, b) not in self.links:
                raise ConfigError(f"Background route {route} uses missing link {a}-{b}")

    def _background_arrival(
        self, spec: BackgroundFlowSpec, arrivals: Iterator[float], base: float, until_ms: float | None
    ) -> None:
        self.inject(self._new_packet(spec.flow, spec.packet_bytes, PacketKind.BACKGROUND, route=spec.route))
        nxt = base + next(arrivals)
        if until_ms is None or nxt <= until_ms:
            self.engine.post_event(nxt, self._background_arrival, spec, arrivals, base, until_ms)

    # Per-hop processing

    def _arrive(self, router: str, pkt: Packet, upstream: str | None) -> None:
        now = self.engine.now
        if upstream is not None:
            self.stats.hops += 1
            engine_delay = pkt.hop_delays[-1]
            if pkt.telemetry is not None:
                delay, _ = pop_telemetry(pkt, now)
                if delay != engine_delay:
                    self.stats.telemetry_mismatches += 1
            else:
                delay = engine_delay
            pkt.returns.add(-delay)
            for observer in self.hop_observers:
                observer(pkt, router, upstream, delay)
            if pkt.kind is PacketKind.DATA and self.forwarder is not None:
                self.forwarder.on_hop(router, upstream, pkt, delay, now)
        pkt.hop_trace.append((router, now))
        if self._trace is not None:
            self._trace.write(json.dumps({"packet": pkt.id, "hop": router, "arrival_ms": now}) + "\n")

        if router == self.topo.hosts[pkt.flow.dst]:
            self._deliver(pkt, now)
        elif pkt.ttl <= 0:
            logger.debug("TTL expired for packet %d of %s at %s", pkt.id, pkt.flow, router)
            self._drop(pkt, now, "ttl")
        else:
            self._forward(router, pkt, now)

    def _next_hop(self, router: str, pkt: Packet, now: float) -> str:
        if pkt.route is not None:
            position = pkt.route.index(router) if router in pkt.route else -1
            if position < 0 or position + 1 >= len(pkt.route):
                raise RoutingFault(f"{router} is not on the fixed route {pkt.route}")
            return pkt.route[position + 1]
        forwarder = self.forwarder if pkt.kind is PacketKind.DATA else self.background_forwarder
        forwarder = forwarder or self.forwarder
        if forwarder is None:
            raise RoutingFault("No forwarder configured")
        return forwarder.next_hop(router, pkt, now)

    def _forward(self, router: str, pkt: Packet, now: float) -> None:
        try:
            nxt = self._next_hop(router, pkt, now)
            link = self.link(router, nxt)
        except RoutingFault as exc:
            if self.abort_on_fault:
                raise
            logger.warning("Routing fault at %s for %s: %s", router, pkt.flow, exc)
            self._drop(pkt, now, "fault")
            return
        pkt.ttl -= 1
        if self.cfg.telemetry and pkt.kind is PacketKind.DATA:
            stamp_telemetry(pkt, router, now)
        delivery = link.transmit(pkt, now)
        if delivery is None:
            pkt.telemetry = None
            self._drop(pkt, now, "queue")
            return
        pkt.hop_delays.append(delivery - now)
        self.engine.post_event(delivery, self._arrive, nxt, pkt, router)

    def _deliver(self, pkt: Packet, now: float) -> None:
        self.stats.delivered += 1
        self.live -= 1
        if pkt.has_loop:
            self.stats.loops += 1
        self.stats.flows[pkt.flow].record(now - pkt.created_at, -pkt.returns.value)
        if pkt.message_id is None:
            return
        message = self._messages.get(pkt.message_id)
        if message is None:
            return
        message.remaining -= 1
        if message.remaining == 0:
            message.delivered_at = now
            del self._messages[message.id]
            if message.on_delivered is not None:
                message.on_delivered(message, now)

    def _drop(self, pkt: Packet, now: float, reason: str) -> None:
        self.live -= 1
        if pkt.has_loop:
            self.stats.loops += 1
        if reason == "ttl":
            self.stats.dropped_ttl += 1
        elif reason == "queue":
            self.stats.dropped_queue += 1
        else:
            self.stats.dropped_fault += 1
            self._fail(pkt, now)
            return
        if pkt.message_id is not None and pkt.message_id in self._messages:
            self.engine.post_event(
                now + self.cfg.retransmit_timeout_ms,
                self._retransmit,
                pkt.flow,
                pkt.payload_bytes,
                pkt.kind,
                pkt.message_id,
            )

    def _fail(self, pkt: Packet, now: float) -> None:
        message = self._messages.pop(pkt.message_id, None) if pkt.message_id is not None else None
        if message is None:
            return
        message.failed_at = now
        self.stats.failed_messages += 1
        logger.error("Message %d (%s) lost a fragment to a routing fault", message.id, message.flow)
        if message.on_failed is not None:
            message.on_failed(message, now)

    def _retransmit(self, flow: FlowKey, payload_bytes: int, kind: PacketKind, message_id: int) -> None:
        self.stats.retransmissions += 1
        logger.debug("Retransmitting a fragment of message %d (%s)", message_id, flow)
        self.inject(self._new_packet(flow, payload_bytes, kind, message_id))


def fragment_count(nbytes: int, mtu_bytes: int = DEFAULT_MTU_BYTES) -> int:
    return max(1, math.ceil(nbytes / mtu_bytes))
