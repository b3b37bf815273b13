"""Regularized local SGD, synchronous aggregation and the COMM message protocol.

The aggregator and the workers are state machines that only advance inside
simulator events. Messages travel through a `Transport`: `SimTransport` routes
them over the simulated mesh, `LoopbackTransport` delivers them after a fixed
latency.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import StrEnum
from functools import partial
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
from sklearn.metrics import accuracy_score

from .config import ACK_BYTES, MODEL_HEADER_BYTES, MODEL_REPO_VERSIONS, WEIGHT_BYTES
from .datagen import Shard
from .errors import ConfigError, ProtocolError, RunAborted, TrainingError
from .models import Model
from .simnet import EventEngine, Message, Network

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class ModelVector:
    weights: np.ndarray
    timestamp: float = 0.0
    payload_override: int | None = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if self.weights.size == 0:
            raise TrainingError("A model needs at least one weight")
        if not np.all(np.isfinite(self.weights)):
            raise TrainingError("Model weights must be finite")
        if self.payload_override is not None and self.payload_override <= 0:
            raise TrainingError("payload_override must be positive")

    @property
    def dim(self) -> int:
        return int(self.weights.size)

    @property
    def serialized_bytes(self) -> int:
        return serialize_model(self)

    def copy(self, timestamp: float | None = None) -> ModelVector:
        return ModelVector(
            self.weights.copy(), self.timestamp if timestamp is None else timestamp, self.payload_override
        )


def serialize_model(m: ModelVector) -> int:
    """Bytes the model occupies on the wire."""
    if m.payload_override is not None:
        return m.payload_override
    return m.dim * WEIGHT_BYTES + MODEL_HEADER_BYTES


@dataclass(frozen=True)
class TrainingConfig:
    eta: float = 0.1
    rho: float = 0.0
    batch_size: int = 100
    local_epochs: int = 1
    max_rounds: int = 50
    target_loss: float | None = None
    target_accuracy: float | None = None
    per_batch_compute_ms: float = 10.0
    round_timeout_ms: float | None = None
    drop_stragglers: bool = False
    status_poll_ms: float | None = None

    def __post_init__(self) -> None:
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.rho < 0:
            raise ConfigError("rho must be non-negative")
        if self.batch_size < 1 or self.local_epochs < 1 or self.max_rounds < 1:
            raise ConfigError("batch_size, local_epochs and max_rounds must be positive")
        if self.per_batch_compute_ms < 0:
            raise ConfigError("per_batch_compute_ms must be non-negative")
        for name in ("round_timeout_ms", "status_poll_ms"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"{name} must be positive")


def local_sgd_step(
    w: ModelVector,
    X: np.ndarray,
    y: np.ndarray,
    eta: float,
    rho: float,
    w_global: ModelVector,
    model: Model,
) -> ModelVector:
    """One proximal mini-batch step: w - eta * (mean grad + 2 rho (w - w_global))."""
    if w.dim != w_global.dim or w.dim != model.dim:
        raise TrainingError(f"Dimension mismatch: local {w.dim}, global {w_global.dim}, model {model.dim}")
    if len(y) < 1:
        raise TrainingError("Empty batch")
    grad = model.gradient(w.weights, X, y)
    if not np.all(np.isfinite(grad)):
        raise TrainingError("Non-finite gradient")
    step = grad + 2.0 * rho * (w.weights - w_global.weights)
    return ModelVector(w.weights - eta * step, w.timestamp, w.payload_override)


def aggregate(models: Sequence[tuple[ModelVector, int]]) -> ModelVector:
    """Weighted average with lambda_k = n_k / sum(n)."""
    if not models:
        raise TrainingError("Nothing to aggregate")
    dims = {m.dim for m, _ in models}
    if len(dims) != 1:
        raise TrainingError(f"Cannot aggregate models of dimensions {sorted(dims)}")
    counts = np.array([n for _, n in models], dtype=float)
    if np.any(counts <= 0):
        raise TrainingError("Sample counts must be positive")
    lambdas = counts / counts.sum()
    stacked = np.stack([m.weights for m, _ in models])
    return ModelVector(lambdas @ stacked, payload_override=models[0][0].payload_override)


def evaluate(m: ModelVector, X: np.ndarray, y: np.ndarray, model: Model) -> tuple[float, float]:
    if len(y) == 0:
        raise TrainingError("Cannot evaluate on an empty dataset")
    loss = model.loss(m.weights, X, y)
    accuracy = float(accuracy_score(y, model.predict(m.weights, X)))
    return loss, accuracy


class ModelRepo:
    """Time-stamped model store keeping the latest versions per (kind, owner)."""

    def __init__(self, versions: int = MODEL_REPO_VERSIONS):
        self.versions = versions
        self._store: dict[tuple[str, str], deque[ModelVector]] = {}

    def put(self, kind: str, owner: str, model: ModelVector) -> None:
        self._store.setdefault((kind, owner), deque(maxlen=self.versions)).append(model)

    def latest(self, kind: str, owner: str) -> ModelVector | None:
        history = self._store.get((kind, owner))
        return history[-1] if history else None

    def history(self, kind: str, owner: str) -> list[ModelVector]:
        return list(self._store.get((kind, owner), ()))


class MessageKind(StrEnum):
    REGISTER = "REGISTER"
    GLOBAL_MODEL = "GLOBAL_MODEL"
    GLOBAL_MODEL_RECV = "GLOBAL_MODEL_RECV"
    TRAIN_REQUEST = "TRAIN_REQUEST"
    LOCAL_MODEL = "LOCAL_MODEL"
    LOCAL_MODEL_RECV = "LOCAL_MODEL_RECV"
    STATUS_QUERY = "STATUS_QUERY"
    STATUS_REPLY = "STATUS_REPLY"


MODEL_KINDS = frozenset({MessageKind.GLOBAL_MODEL, MessageKind.LOCAL_MODEL})


class WorkerStatus(StrEnum):
    IDLE = "IDLE"
    TRAINING_STARTED = "TRAINING_STARTED"
    TRAINING_FINISHED = "TRAINING_FINISHED"


_TRANSITIONS = {
    WorkerStatus.IDLE: WorkerStatus.TRAINING_STARTED,
    WorkerStatus.TRAINING_STARTED: WorkerStatus.TRAINING_FINISHED,
    WorkerStatus.TRAINING_FINISHED: WorkerStatus.IDLE,
}


@dataclass(frozen=True)
class CommMessage:
    kind: MessageKind
    sender: str
    receiver: str
    round: int
    model: ModelVector | None = None
    local_epochs: int | None = None
    batch_size: int | None = None
    n_samples: int | None = None
    status: WorkerStatus | None = None
    meta: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if (self.kind in MODEL_KINDS) != (self.model is not None):
            raise ProtocolError(f"{self.kind} {'needs' if self.kind in MODEL_KINDS else 'cannot carry'} a model")

    @property
    def payload_bytes(self) -> int:
        return serialize_model(self.model) if self.model is not None else ACK_BYTES


class Transport(Protocol):
    engine: EventEngine

    def register(self, endpoint: str, handler: Callable[[CommMessage, float], None]) -> None: ...

    def send(self, msg: CommMessage) -> None: ...


class _HandlerRegistry:
    def __init__(self) -> None:
        self._handlers: dict[str, Callable[[CommMessage, float], None]] = {}
        self.sent: list[tuple[float, CommMessage]] = []

    def register(self, endpoint: str, handler: Callable[[CommMessage, float], None]) -> None:
        if endpoint in self._handlers:
            raise ConfigError(f"Endpoint {endpoint!r} registered twice")
        self._handlers[endpoint] = handler

    def _handler(self, endpoint: str) -> Callable[[CommMessage, float], None]:
        try:
            return self._handlers[endpoint]
        except KeyError:
            raise ProtocolError(f"No node listens on {endpoint!r}") from None


class LoopbackTransport(_HandlerRegistry):
    """Ideal transport: fixed latency plus optional serialization at `bandwidth_bps`."""

    def __init__(self, engine: EventEngine, latency_ms: float = 0.0, bandwidth_bps: float | None = None):
        super().__init__()
        self.engine = engine
        self.latency_ms = latency_ms
        self.bandwidth_bps = bandwidth_bps

    def send(self, msg: CommMessage) -> None:
        handler = self._handler(msg.receiver)
        delay = self.latency_ms
        if self.bandwidth_bps:
            delay += msg.payload_bytes * 8000.0 / self.bandwidth_bps
        self.sent.append((self.engine.now, msg))
        self.engine.post_event(self.engine.now + delay, handler, msg, delay, label=f"deliver:{msg.kind}")


class SimTransport(_HandlerRegistry):
    """Carries COMM messages as fragmented transfers over the simulated mesh."""

    def __init__(self, network: Network):
        super().__init__()
        self.network = network
        self.engine = network.engine

    def send(self, msg: CommMessage) -> None:
        handler = self._handler(msg.receiver)
        self.sent.append((self.engine.now, msg))
        self.network.send_message(
            msg.sender,
            msg.receiver,
            msg.payload_bytes,
            on_delivered=partial(self._delivered, handler, msg),
            on_failed=partial(self._failed, msg),
        )

    @staticmethod
    def _delivered(handler: Callable[[CommMessage, float], None], msg: CommMessage, transfer: Message, now: float):
        handler(msg, transfer.delay_ms)

    @staticmethod
    def _failed(msg: CommMessage, transfer: Message, now: float) -> None:
        raise RunAborted(f"{msg.kind} from {msg.sender} to {msg.receiver} lost a fragment at {now:.1f} ms")


@dataclass(frozen=True)
class JournalEntry:
    time: float
    round: int
    node: str
    event: str


class Journal:
    def __init__(self) -> None:
        self.entries: list[JournalEntry] = []

    def record(self, time: float, round_: int, node: str, event: str) -> None:
        self.entries.append(JournalEntry(time, round_, node, event))

    def events(self, event: str) -> list[JournalEntry]:
        return [e for e in self.entries if e.event == event]


@dataclass(eq=False)
class WorkerState:
    id: str
    shard: Shard
    router: str
    local_epochs: int = 1
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    status: WorkerStatus = WorkerStatus.IDLE
    global_model: ModelVector | None = None
    local_model: ModelVector | None = None
    round: int = 0
    compute_ms: float = 0.0

    def __post_init__(self) -> None:
        if len(self.shard) == 0:
            raise TrainingError(f"Worker {self.id} has an empty shard")
        if self.local_epochs < 1:
            raise TrainingError(f"Worker {self.id} needs at least one local epoch")

    @property
    def n_k(self) -> int:
        return len(self.shard)

    def transition(self, status: WorkerStatus) -> None:
        if _TRANSITIONS[self.status] is not status:
            raise ProtocolError(f"Worker {self.id} cannot move from {self.status} to {status}")
        self.status = status


def run_local_training(
    ws: WorkerState, H_k: int, B: int, cfg: TrainingConfig, *, model: Model
) -> ModelVector:
    """H_k epochs of proximal mini-batch SGD anchored at the received global model."""
    if ws.global_model is None:
        raise ProtocolError(f"Worker {ws.id} has not received a global model")
    ws.transition(WorkerStatus.TRAINING_STARTED)
    anchor = ws.global_model
    w = anchor.copy()
    X, y = ws.shard.X, ws.shard.y
    n = len(y)
    for _ in range(H_k):
        order = ws.rng.permutation(n)
        for start in range(0, n, B):
            batch = order[start : start + B]
            w = local_sgd_step(w, X[batch], y[batch], cfg.eta, cfg.rho, anchor, model)
    ws.compute_ms = H_k * math.ceil(n / B) * cfg.per_batch_compute_ms
    ws.local_model = w
    ws.transition(WorkerStatus.TRAINING_FINISHED)
    return w


class WorkerNode:
    def __init__(
        self,
        state: WorkerState,
        transport: Transport,
        model: Model,
        cfg: TrainingConfig,
        aggregator: str,
        *,
        journal: Journal | None = None,
    ):
        self.state = state
        self.transport = transport
        self.model = model
        self.cfg = cfg
        self.aggregator = aggregator
        self.journal = journal
        self.repo = ModelRepo()
        transport.register(state.id, self.receive)

    @property
    def engine(self) -> EventEngine:
        return self.transport.engine

    def _send(self, kind: MessageKind, round_: int, **fields) -> None:
        self.transport.send(CommMessage(kind, self.state.id, self.aggregator, round_, **fields))

    def register(self) -> None:
        self._send(MessageKind.REGISTER, 0, n_samples=self.state.n_k)

    def receive(self, msg: CommMessage, delay_ms: float) -> None:
        ws = self.state
        match msg.kind:
            case MessageKind.GLOBAL_MODEL:
                if ws.status is WorkerStatus.TRAINING_FINISHED:
                    ws.transition(WorkerStatus.IDLE)
                ws.global_model = msg.model.copy()
                ws.round = msg.round
                self.repo.put("global", self.aggregator, ws.global_model)
                self._send(MessageKind.GLOBAL_MODEL_RECV, msg.round, meta={"downlink_ms": delay_ms})
            case MessageKind.TRAIN_REQUEST:
                self._train(msg, delay_ms)
            case MessageKind.LOCAL_MODEL_RECV:
                if ws.status is WorkerStatus.TRAINING_FINISHED and msg.round == ws.round + 1:
                    ws.transition(WorkerStatus.IDLE)
            case MessageKind.STATUS_QUERY:
                self._send(MessageKind.STATUS_REPLY, msg.round, status=ws.status)
            case _:
                raise ProtocolError(f"Worker {ws.id} cannot handle {msg.kind}")

    def _train(self, msg: CommMessage, request_ms: float) -> None:
        ws = self.state
        if ws.status is not WorkerStatus.IDLE:
            raise ProtocolError(f"Worker {ws.id} got a train request while {ws.status}")
        now = self.engine.now
        if self.journal is not None:
            self.journal.record(now, msg.round, ws.id, "compute_start")
        local = run_local_training(ws, msg.local_epochs, msg.batch_size, self.cfg, model=self.model)
        meta = {"request_ms": request_ms, "compute_ms": ws.compute_ms}
        self.engine.post_event(
            now + ws.compute_ms, self._upload, msg.round, local, meta, label=f"upload:{ws.id}"
        )

    def _upload(self, round_: int, local: ModelVector, meta: dict[str, float]) -> None:
        model = local.copy(timestamp=self.engine.now)
        self.repo.put("local", self.state.id, model)
        self._send(MessageKind.LOCAL_MODEL, round_, model=model, meta=meta)


@dataclass(frozen=True)
class WorkerRecord:
    id: str
    n_k: int
    local_epochs: int


@dataclass(frozen=True)
class WorkerPhase:
    request_ms: float = 0.0
    compute_ms: float = 0.0
    uplink_ms: float = 0.0
    downlink_ms: float = 0.0
    ack_at_ms: float = 0.0


@dataclass
class RoundRecord:
    round: int
    start_ms: float
    end_ms: float
    aggregated_ms: float
    loss: float
    accuracy: float
    worker_delays: dict[str, float]
    phases: dict[str, WorkerPhase]
    dropped: tuple[str, ...] = ()

    @property
    def tau_max_ms(self) -> float:
        return max(self.worker_delays.values()) if self.worker_delays else 0.0

    @property
    def mean_e2e_ms(self) -> float:
        return float(np.mean(list(self.worker_delays.values()))) if self.worker_delays else 0.0

    @property
    def compute_ms(self) -> float:
        """Local training time of the worker whose update closed the collection."""
        kept = [p for name, p in self.phases.items() if name not in self.dropped]
        if not kept:
            return 0.0
        return max(kept, key=lambda p: p.request_ms + p.compute_ms + p.uplink_ms).compute_ms

    @property
    def network_ms(self) -> float:
        return self.end_ms - self.start_ms - self.compute_ms


class RoundPhase(StrEnum):
    REGISTERING = "registering"
    BROADCASTING = "broadcasting"
    COLLECTING = "collecting"
    IDLE = "idle"
    FINISHED = "finished"


class ReceiptStatus(StrEnum):
    GLOBAL_MODEL_RECV = "GLOBAL_MODEL_RECV"
    LOCAL_MODEL_RECV = "LOCAL_MODEL_RECV"


@dataclass
class AggregatorState:
    registry: dict[str, WorkerRecord] = field(default_factory=dict)
    round: int = 0
    global_model: ModelVector | None = None
    status: dict[str, ReceiptStatus] = field(default_factory=dict)
    fresh: dict[str, ModelVector] = field(default_factory=dict)
    phase: RoundPhase = RoundPhase.REGISTERING


class AggregatorNode:
    """Synchronous local-SGD aggregator.

    Round 1 initializes and broadcasts the global model and collects the
    acknowledgments. Every later round dispatches TRAIN_REQUESTs, waits at the
    barrier for all LOCAL_MODELs, aggregates in registry order and broadcasts the
    result. A round closes when every GLOBAL_MODEL_RECV is in.
    """

    def __init__(
        self,
        endpoint: str,
        transport: Transport,
        model: Model,
        cfg: TrainingConfig,
        schedule: Mapping[str, int],
        *,
        eval_data: tuple[np.ndarray, np.ndarray],
        init_rng: np.random.Generator,
        payload_override: int | None = None,
        journal: Journal | None = None,
        autorun: bool = True,
    ):
        self.endpoint = endpoint
        self.transport = transport
        self.model = model
        self.cfg = cfg
        self.schedule = dict(schedule)
        self.eval_X, self.eval_y = eval_data
        self.init_rng = init_rng
        self.payload_override = payload_override
        self.journal = journal
        self.autorun = autorun
        self.state = AggregatorState()
        self.repo = ModelRepo()
        self.records: list[RoundRecord] = []
        self.status_replies: list[tuple[float, str, WorkerStatus]] = []
        self.round_listeners: list[Callable[[RoundRecord], None]] = []
        self.finish_listeners: list[Callable[[], None]] = []
        self._round_start = 0.0
        self._aggregated_at = 0.0
        self._phases: dict[str, dict[str, float]] = {}
        self._delays: dict[str, float] = {}
        self._dropped: tuple[str, ...] = ()
        self._evaluation = (math.nan, math.nan)
        transport.register(endpoint, self.receive)

    @property
    def engine(self) -> EventEngine:
        return self.transport.engine

    @property
    def registry_complete(self) -> bool:
        return len(self.state.registry) == len(self.schedule)

    @property
    def finished(self) -> bool:
        return self.state.phase is RoundPhase.FINISHED

    def _send(self, kind: MessageKind, receiver: str, **fields) -> None:
        self.transport.send(CommMessage(kind, self.endpoint, receiver, self.state.round, **fields))

    def _journal(self, worker: str, event: str) -> None:
        if self.journal is not None:
            self.journal.record(self.engine.now, self.state.round, worker, event)

    def receive(self, msg: CommMessage, delay_ms: float) -> None:
        match msg.kind:
            case MessageKind.REGISTER:
                self._on_register(msg)
            case MessageKind.GLOBAL_MODEL_RECV:
                self._on_global_ack(msg)
            case MessageKind.LOCAL_MODEL:
                self._on_local_model(msg, delay_ms)
            case MessageKind.STATUS_REPLY:
                self.status_replies.append((self.engine.now, msg.sender, msg.status))
            case _:
                raise ProtocolError(f"Aggregator cannot handle {msg.kind}")

    def _on_register(self, msg: CommMessage) -> None:
        if msg.sender not in self.schedule:
            raise ProtocolError(f"Unknown worker {msg.sender!r} tried to register")
        self.state.registry[msg.sender] = WorkerRecord(msg.sender, msg.n_samples, self.schedule[msg.sender])
        if self.registry_complete:
            self.state.phase = RoundPhase.IDLE
            logger.debug("All %d workers registered at %.1f ms", len(self.schedule), self.engine.now)
            if self.autorun:
                self.begin_round()

    def begin_round(self) -> None:
        state = self.state
        if state.phase is not RoundPhase.IDLE:
            raise ProtocolError(f"Cannot begin a round while {state.phase}")
        state.round += 1
        self._round_start = self.engine.now
        self._phases = {wid: {} for wid in state.registry}
        self._delays = {}
        self._dropped = ()
        if state.round == 1:
            weights = self.model.init_weights(self.init_rng)
            state.global_model = ModelVector(weights, self.engine.now, self.payload_override)
            self.repo.put("global", self.endpoint, state.global_model)
            self._evaluation = evaluate(state.global_model, self.eval_X, self.eval_y, self.model)
            self._aggregated_at = self.engine.now
            self._broadcast()
            return

        state.phase = RoundPhase.COLLECTING
        state.status.clear()
        state.fresh.clear()
        for wid in sorted(state.registry):
            record = state.registry[wid]
            self._journal(wid, "train_request")
            self._send(
                MessageKind.TRAIN_REQUEST, wid, local_epochs=record.local_epochs, batch_size=self.cfg.batch_size
            )
        if self.cfg.round_timeout_ms is not None:
            self.engine.post_event(
                self.engine.now + self.cfg.round_timeout_ms, self._timeout, state.round, label="round_timeout"
            )
        if self.cfg.status_poll_ms is not None:
            self.engine.post_event(
                self.engine.now + self.cfg.status_poll_ms, self._poll, state.round, label="status_poll"
            )

    def _on_local_model(self, msg: CommMessage, delay_ms: float) -> None:
        state = self.state
        if msg.round != state.round or state.phase is not RoundPhase.COLLECTING:
            logger.warning("Discarding late local model of %s for round %d", msg.sender, msg.round)
            return
        if msg.sender in state.fresh:
            raise ProtocolError(f"{msg.sender} sent two local models in round {msg.round}")
        state.fresh[msg.sender] = msg.model
        state.status[msg.sender] = ReceiptStatus.LOCAL_MODEL_RECV
        self.repo.put("local", msg.sender, msg.model)
        self._delays[msg.sender] = delay_ms
        self._phases[msg.sender].update(msg.meta, uplink_ms=delay_ms)
        self._journal(msg.sender, "local_model_recv")
        self._send(MessageKind.LOCAL_MODEL_RECV, msg.sender)
        if len(state.fresh) == len(state.registry):
            self._aggregate()

    def _aggregate(self) -> None:
        state = self.state
        order = [wid for wid in sorted(state.registry) if wid in state.fresh]
        merged = aggregate([(state.fresh[wid], state.registry[wid].n_k) for wid in order])
        state.global_model = merged.copy(timestamp=self.engine.now)
        self.repo.put("global", self.endpoint, state.global_model)
        self._evaluation = evaluate(state.global_model, self.eval_X, self.eval_y, self.model)
        self._aggregated_at = self.engine.now
        self._journal(self.endpoint, "aggregate")
        self._broadcast()

    def _broadcast(self) -> None:
        state = self.state
        state.phase = RoundPhase.BROADCASTING
        state.status.clear()
        for wid in sorted(state.registry):
            self._send(MessageKind.GLOBAL_MODEL, wid, model=state.global_model)

    def _on_global_ack(self, msg: CommMessage) -> None:
        state = self.state
        if msg.round != state.round or state.phase is not RoundPhase.BROADCASTING:
            raise ProtocolError(f"Unexpected GLOBAL_MODEL_RECV from {msg.sender} for round {msg.round}")
        state.status[msg.sender] = ReceiptStatus.GLOBAL_MODEL_RECV
        self._phases[msg.sender].update(msg.meta, ack_at_ms=self.engine.now)
        self._journal(msg.sender, "global_model_recv")
        if all(state.status.get(wid) is ReceiptStatus.GLOBAL_MODEL_RECV for wid in state.registry):
            self._close_round()

    def _close_round(self) -> None:
        state = self.state
        now = self.engine.now
        phases = {}
        for wid in sorted(state.registry):
            raw = self._phases[wid]
            phases[wid] = WorkerPhase(
                request_ms=raw.get("request_ms", 0.0),
                compute_ms=raw.get("compute_ms", 0.0),
                uplink_ms=raw.get("uplink_ms", 0.0),
                downlink_ms=raw.get("downlink_ms", 0.0),
                ack_at_ms=raw.get("ack_at_ms", now),
            )
        delays = self._delays if state.round > 1 else {wid: p.downlink_ms for wid, p in phases.items()}
        loss, accuracy = self._evaluation
        record = RoundRecord(
            round=state.round,
            start_ms=self._round_start,
            end_ms=now,
            aggregated_ms=self._aggregated_at,
            loss=loss,
            accuracy=accuracy,
            worker_delays=dict(sorted(delays.items())),
            phases=phases,
            dropped=self._dropped,
        )
        self.records.append(record)
        state.phase = RoundPhase.IDLE
        logger.info(
            "Round %d ended at %.2f min: loss=%.4f acc=%.3f tau_max=%.1f ms",
            record.round,
            record.end_ms / 60000.0,
            record.loss,
            record.accuracy,
            record.tau_max_ms,
        )
        for listener in list(self.round_listeners):
            listener(record)
        if self.finished:
            return
        if self._should_stop(record):
            state.phase = RoundPhase.FINISHED
            for listener in list(self.finish_listeners):
                listener()
        elif self.autorun:
            self.begin_round()

    def _should_stop(self, record: RoundRecord) -> bool:
        cfg = self.cfg
        if record.round >= cfg.max_rounds:
            return True
        if cfg.target_loss is not None and record.loss <= cfg.target_loss:
            return True
        return cfg.target_accuracy is not None and record.accuracy >= cfg.target_accuracy

    def _missing(self) -> list[str]:
        return [wid for wid in sorted(self.state.registry) if wid not in self.state.fresh]

    def _timeout(self, round_: int) -> None:
        if round_ != self.state.round or self.state.phase is not RoundPhase.COLLECTING:
            return
        missing = self._missing()
        if not self.cfg.drop_stragglers or len(missing) == len(self.state.registry):
            raise RunAborted(f"Round {round_} timed out waiting for {missing}")
        logger.warning("Round %d timed out; aggregating without %s", round_, missing)
        self._dropped = tuple(missing)
        self._aggregate()

    def _poll(self, round_: int) -> None:
        if round_ != self.state.round or self.state.phase is not RoundPhase.COLLECTING:
            return
        for wid in self._missing():
            self._send(MessageKind.STATUS_QUERY, wid)
        self.engine.post_event(self.engine.now + self.cfg.status_poll_ms, self._poll, round_, label="status_poll")


def aggregator_round(agg: AggregatorNode) -> RoundRecord:
    """Runs the aggregator's next round to completion on its engine."""
    if not agg.registry_complete:
        raise ProtocolError("Workers have not registered yet")
    engine = agg.engine
    done: list[RoundRecord] = []

    def _stop(record: RoundRecord) -> None:
        done.append(record)
        engine.stop()

    agg.round_listeners.append(_stop)
    try:
        if agg.state.phase is RoundPhase.IDLE:
            agg.begin_round()
        engine.run()
    finally:
        agg.round_listeners.remove(_stop)
    if not done:
        raise RunAborted(f"Round {agg.state.round} never completed")
    return done[0]
