"""Scenario files and presets.

A scenario is a YAML mapping with the sections `topology` (or `topology_preset`),
`routing`, `network`, `fl`, `data`, `background` and `seeds`. Presets bundle a base
scenario, a list of protocols and named variants deep-merged over the base.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .config import (
    DEFAULT_K_SHORTEST,
    DEFAULT_MAX_SIM_TIME_MS,
    DEFAULT_MTU_BYTES,
    DEFAULT_REPORT_PERIOD_MS,
    DEFAULT_RETRANSMIT_TIMEOUT_MS,
    PRESETS_DIR,
    TOPOLOGIES_DIR,
)
from .datagen import PartitionSpec, StragglerSpec
from .errors import ConfigError, DataError
from .fedcore import TrainingConfig
from .models import MODEL_KINDS
from .routing import PROTOCOLS, PolicyConfig, PolicyKind
from .simnet import BackgroundFlowSpec, FlowKey, NetworkConfig
from .topology import RefineConfig, Topology, build_topology

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoutingSection:
    protocol: str = "baseline"
    alpha: float = 0.7
    epsilon0: float = 0.5
    decay_beta: float = 0.9
    tau: float = 2.0
    smoothing: float | None = None
    report_period_ms: float = DEFAULT_REPORT_PERIOD_MS
    dag_filter: bool = True
    refine_method: str = "auto"
    k: int = DEFAULT_K_SHORTEST
    qtable_init: str | None = None
    hop_prior_ms: float | None = None

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"Unknown protocol {self.protocol!r}; expected one of {sorted(PROTOCOLS)}")
        if self.hop_prior_ms is not None and self.hop_prior_ms <= 0:
            raise ConfigError(f"hop_prior_ms must be positive, got {self.hop_prior_ms}")

    @property
    def is_rl(self) -> bool:
        return PROTOCOLS[self.protocol] is not None

    def policy(self, seed: int) -> PolicyConfig:
        kind = PROTOCOLS[self.protocol] or PolicyKind.GREEDY
        return PolicyConfig(kind, self.alpha, self.epsilon0, self.decay_beta, self.tau, seed)

    def refine(self) -> RefineConfig:
        return RefineConfig(method=self.refine_method, k=self.k, dag_filter=self.dag_filter)


@dataclass(frozen=True)
class NetworkSection:
    mtu_bytes: int = DEFAULT_MTU_BYTES
    queue_limit: int | None = None
    ttl_hops: int | None = None
    retransmit_timeout_ms: float = DEFAULT_RETRANSMIT_TIMEOUT_MS
    telemetry: bool = True
    trace: bool = False

    def network_config(self, trace_path: Path | None = None) -> NetworkConfig:
        return NetworkConfig(
            mtu_bytes=self.mtu_bytes,
            queue_limit=self.queue_limit,
            ttl_hops=self.ttl_hops,
            retransmit_timeout_ms=self.retransmit_timeout_ms,
            telemetry=self.telemetry,
            trace_path=trace_path if self.trace else None,
        )


@dataclass(frozen=True)
class FLSection:
    server: str = "SERVER"
    server_router: str = "R1"
    workers: tuple[tuple[str, int], ...] = ()
    model: str = "logistic"
    hidden: int = 32
    eta: float = 0.1
    rho: float = 0.0
    batch_size: int = 100
    local_epochs: int = 1
    max_rounds: int = 50
    target_loss: float | None = None
    target_accuracy: float | None = None
    per_batch_compute_ms: float = 10.0
    payload_bytes: int | None = None
    round_timeout_ms: float | None = None
    drop_stragglers: bool = False
    status_poll_ms: float | None = None
    stragglers: StragglerSpec | None = None

    def __post_init__(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"Unknown model kind {self.model!r}; expected one of {MODEL_KINDS}")
        if not self.workers:
            raise ConfigError("fl.workers places no workers")
        if any(count < 1 for _, count in self.workers):
            raise ConfigError("fl.workers counts must be positive")

    @property
    def worker_count(self) -> int:
        return sum(count for _, count in self.workers)

    def placements(self) -> list[tuple[str, str]]:
        """(worker id, router) in declaration order; ids are W1..WK."""
        routers = [router for router, count in self.workers for _ in range(count)]
        return [(f"W{i}", router) for i, router in enumerate(routers, start=1)]

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            eta=self.eta,
            rho=self.rho,
            batch_size=self.batch_size,
            local_epochs=self.local_epochs,
            max_rounds=self.max_rounds,
            target_loss=self.target_loss,
            target_accuracy=self.target_accuracy,
            per_batch_compute_ms=self.per_batch_compute_ms,
            round_timeout_ms=self.round_timeout_ms,
            drop_stragglers=self.drop_stragglers,
            status_poll_ms=self.status_poll_ms,
        )


@dataclass(frozen=True)
class DataSection:
    n: int = 2000
    d: int = 20
    classes: int = 10
    separation: float = 5.0
    partition: str = "iid"
    dirichlet_beta: float = 0.5


@dataclass(frozen=True)
class BackgroundSection:
    src: str
    dst: str
    rate_pps: float
    packet_bytes: int = DEFAULT_MTU_BYTES
    route: tuple[str, ...] | None = None

    def spec(self) -> BackgroundFlowSpec:
        return BackgroundFlowSpec(FlowKey(self.src, self.dst), self.rate_pps, self.packet_bytes, self.route)


@dataclass(frozen=True)
class Seeds:
    sim: int = 0
    rl: int = 0
    data: int = 0
    model_init: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"seeds.{f.name} must be a non-negative integer, got {value!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    topology: Mapping[str, Any]
    fl: FLSection
    routing: RoutingSection = RoutingSection()
    network: NetworkSection = NetworkSection()
    data: DataSection = DataSection()
    background: tuple[BackgroundSection, ...] = ()
    seeds: Seeds = Seeds()
    max_sim_time_ms: float = DEFAULT_MAX_SIM_TIME_MS
    replicates: int = 1

    @property
    def protocol(self) -> str:
        return self.routing.protocol

    def build_topology(self) -> Topology:
        hosts = dict(self.topology.get("hosts") or {})
        extra = {self.fl.server: self.fl.server_router, **dict(self.fl.placements())}
        clash = sorted(set(hosts) & set(extra))
        if clash:
            raise ConfigError(f"Endpoints {clash} are declared both as hosts and as FL nodes")
        return build_topology({**self.topology, "hosts": {**hosts, **extra}})

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(self.fl.worker_count, self.data.partition, self.data.dirichlet_beta)

    def validate(self) -> ExperimentConfig:
        topo = self.build_topology()
        self.fl.training_config()
        self.routing.policy(self.seeds.rl)
        self.routing.refine()
        self.network.network_config()
        try:
            self.partition_spec()
        except DataError as exc:
            raise ConfigError(str(exc)) from exc
        for flow in self.background:
            for endpoint in (flow.src, flow.dst):
                topo.router_of(endpoint)
            flow.spec()
        if self.max_sim_time_ms <= 0 or self.replicates < 1:
            raise ConfigError("max_sim_time_ms and replicates must be positive")
        return self

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, seeds=Seeds(seed, seed, seed, seed))

    def with_protocol(self, protocol: str) -> ExperimentConfig:
        return replace(self, routing=replace(self.routing, protocol=protocol))

    def fingerprint(self) -> str:
        """Digest of everything except the name, routing section and RL seed."""
        payload = asdict(self)
        for key in ("name", "routing", "replicates"):
            payload.pop(key)
        payload["seeds"].pop("rl")
        blob = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    """Recursively merges mappings; any other value in `override` replaces the base value."""
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _section(cls: type, raw: Any, name: str) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"Section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) {unknown} in section {name!r}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"Section {name!r}: {exc}") from None
    except DataError as exc:
        raise ConfigError(f"Section {name!r}: {exc}") from exc


def _parse_workers(raw: Any) -> tuple[tuple[str, int], ...]:
    if isinstance(raw, Mapping):
        items = list(raw.items())
    elif isinstance(raw, list):
        items = [tuple(entry) for entry in raw]
    else:
        raise ConfigError("fl.workers must map router -> worker count")
    try:
        return tuple((str(router), int(count)) for router, count in items)
    except (TypeError, ValueError):
        raise ConfigError(f"fl.workers entries must be (router, count) pairs: {raw!r}") from None


def _load_topology_preset(name: str, base_dir: Path | None) -> dict[str, Any]:
    candidates = [TOPOLOGIES_DIR / f"{name}.yaml"]
    if base_dir is not None:
        candidates.insert(0, base_dir / name)
    for path in candidates:
        if path.is_file():
            return yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    raise ConfigError(f"Unknown topology preset {name!r}")


_TOP_LEVEL = {
    "name",
    "topology",
    "topology_preset",
    "routing",
    "network",
    "fl",
    "data",
    "background",
    "seeds",
    "max_sim_time_ms",
    "replicates",
}


def config_from_dict(raw: Mapping[str, Any], *, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("A scenario must be a mapping")
    unknown = sorted(set(raw) - _TOP_LEVEL)
    if unknown:
        raise ConfigError(f"Unknown top-level key(s) {unknown}")

    topology = dict(raw.get("topology") or {})
    if raw.get("topology_preset"):
        topology = deep_merge(_load_topology_preset(raw["topology_preset"], base_dir), topology)

    fl_raw = dict(raw.get("fl") or {})
    fl_raw["workers"] = _parse_workers(fl_raw.get("workers") or {})
    if fl_raw.get("stragglers") is not None:
        fl_raw["stragglers"] = _section(StragglerSpec, fl_raw["stragglers"], "fl.stragglers")

    background = []
    for index, entry in enumerate(raw.get("background") or []):
        entry = dict(entry)
        if entry.get("route") is not None:
            entry["route"] = tuple(str(r) for r in entry["route"])
        background.append(_section(BackgroundSection, entry, f"background[{index}]"))

    cfg = ExperimentConfig(
        name=str(raw.get("name", "scenario")),
        topology=topology,
        fl=_section(FLSection, fl_raw, "fl"),
        routing=_section(RoutingSection, raw.get("routing"), "routing"),
        network=_section(NetworkSection, raw.get("network"), "network"),
        data=_section(DataSection, raw.get("data"), "data"),
        background=tuple(background),
        seeds=_section(Seeds, raw.get("seeds"), "seeds"),
        max_sim_time_ms=float(raw.get("max_sim_time_ms", DEFAULT_MAX_SIM_TIME_MS)),
        replicates=int(raw.get("replicates", 1)),
    )
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raw = dict(raw or {})
    raw.setdefault("name", path.stem)
    return config_from_dict(raw, base_dir=path.parent)


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    base: Mapping[str, Any]
    protocols: tuple[str, ...]
    variants: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    target_loss: float | None = None

    @property
    def variant_names(self) -> list[str]:
        return list(self.variants) or ["default"]

    def config(self, variant: str | None = None, protocol: str | None = None) -> ExperimentConfig:
        variant = variant or self.variant_names[0]
        if self.variants and variant not in self.variants:
            raise ConfigError(f"Preset {self.name!r} has no variant {variant!r}; choose from {self.variant_names}")
        raw = deep_merge(self.base, self.variants.get(variant, {}))
        raw["name"] = f"{self.name}-{variant}"
        cfg = config_from_dict(raw, base_dir=PRESETS_DIR)
        return cfg.with_protocol(protocol) if protocol else cfg

    def summary(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "variants": self.variant_names,
            "protocols": list(self.protocols),
            "target_loss": self.target_loss,
        }


def list_presets() -> list[str]:
    return sorted(p.stem for p in PRESETS_DIR.glob("*.yaml"))


def load_preset(name: str) -> Preset:
    path = Path(name)
    if not path.is_file():
        path = PRESETS_DIR / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"Unknown preset {name!r}; available: {list_presets()}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    unknown = sorted(set(raw) - {"description", "base", "protocols", "variants", "target_loss"})
    if unknown:
        raise ConfigError(f"Preset {path.stem!r} has unknown key(s) {unknown}")
    protocols = tuple(raw.get("protocols") or ["baseline"])
    for protocol in protocols:
        if protocol not in PROTOCOLS:
            raise ConfigError(f"Preset {path.stem!r} lists unknown protocol {protocol!r}")
    return Preset(
        name=path.stem,
        description=str(raw.get("description", "")).strip(),
        base=raw.get("base") or {},
        protocols=protocols,
        variants=raw.get("variants") or {},
        target_loss=raw.get("target_loss"),
    )
