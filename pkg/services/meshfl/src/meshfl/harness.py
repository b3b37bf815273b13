"""Experiment execution, metrics, convergence detection and protocol comparison."""

from __future__ import annotations

import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd

from .config import LOSS_STEP_ROUNDS
from .datagen import assign_stragglers, generate, partition
from .errors import ConfigError, RoutingFault, RunAborted
from .fedcore import AggregatorNode, Journal, RoundRecord, SimTransport, WorkerNode, WorkerState
from .models import build_model
from .routing import BASELINE, BaselineForwarder, QRoutingForwarder, build_agents
from .scenario import ExperimentConfig, Preset, load_preset
from .simnet import EventEngine, FlowStats, Network
from .topology import NetworkController

logger = logging.getLogger(__name__)

ROUND_COLUMNS = [
    "round",
    "start_ms",
    "end_ms",
    "loss",
    "accuracy",
    "tau_max_ms",
    "mean_e2e_ms",
    "compute_ms",
    "network_ms",
]
FLOW_COLUMNS = ["src", "dst", "packets", "mean_e2e_ms", "p50_ms", "p95_ms", "p99_ms", "mean_neg_return_ms"]
QTABLE_COLUMNS = ["round", "time_ms", "router", "src", "dst", "next_hop", "q"]


@dataclass
class MetricsLog:
    name: str
    protocol: str
    fingerprint: str
    rounds: list[RoundRecord] = field(default_factory=list)
    flows: dict[Any, FlowStats] = field(default_factory=dict)
    qtables: list[dict[str, Any]] = field(default_factory=list)
    network: dict[str, int] = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.rounds]

    @property
    def total_ms(self) -> float:
        return self.rounds[-1].end_ms if self.rounds else 0.0

    def round_frame(self) -> pd.DataFrame:
        rows = [
            [r.round, r.start_ms, r.end_ms, r.loss, r.accuracy, r.tau_max_ms, r.mean_e2e_ms, r.compute_ms, r.network_ms]
            for r in self.rounds
        ]
        return pd.DataFrame(rows, columns=ROUND_COLUMNS)

    def flow_frame(self) -> pd.DataFrame:
        rows = []
        for flow in sorted(self.flows):
            stats = self.flows[flow]
            if stats.packets == 0:
                continue
            if stats.delays is not None and len(stats.delays):
                p50, p95, p99 = np.percentile(np.asarray(stats.delays), [50, 95, 99])
            else:
                p50 = p95 = p99 = math.nan
            rows.append(
                [
                    flow.src,
                    flow.dst,
                    stats.packets,
                    stats.delay_sum / stats.packets,
                    p50,
                    p95,
                    p99,
                    stats.neg_return_sum / stats.packets,
                ]
            )
        return pd.DataFrame(rows, columns=FLOW_COLUMNS)

    def qtable_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.qtables, columns=QTABLE_COLUMNS)

    def loss_step_variance(self, first: int = LOSS_STEP_ROUNDS[0], last: int = LOSS_STEP_ROUNDS[1]) -> float | None:
        """Variance of round-to-round loss changes over rounds `first`..`last`; None below three rounds."""
        window = [r.loss for r in self.rounds if first <= r.round <= last]
        if len(window) < 3:
            return None
        return float(np.var(np.diff(window)))

    def summary(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "protocol": self.protocol,
            "rounds": len(self.rounds),
            "final_loss": self.rounds[-1].loss if self.rounds else None,
            "final_accuracy": self.rounds[-1].accuracy if self.rounds else None,
            "total_minutes": self.total_ms / 60000.0,
            "mean_tau_max_ms": float(np.mean([r.tau_max_ms for r in self.rounds])) if self.rounds else None,
            "loss_step_var": self.loss_step_variance(),
            "network": dict(self.network),
        }


class Simulation:
    """One engine instance wired from an `ExperimentConfig`."""

    def __init__(self, cfg: ExperimentConfig, *, trace_path: Path | None = None):
        self.cfg = cfg
        self.topo = cfg.build_topology()
        self.engine = EventEngine()
        self.journal = Journal()
        self.log = MetricsLog(cfg.name, cfg.protocol, cfg.fingerprint())

        fl, data, seeds = cfg.fl, cfg.data, cfg.seeds
        self.dataset = generate(data.n, data.d, data.classes, data.separation, seeds.data)
        self.shards = partition(self.dataset, cfg.partition_spec(), seeds.data, min_size=fl.batch_size)
        if fl.stragglers is not None:
            epochs = assign_stragglers(fl.worker_count, fl.stragglers, seeds.data)
        else:
            epochs = {k: fl.local_epochs for k in range(fl.worker_count)}

        baseline = BaselineForwarder(self.topo)
        self.forwarder: QRoutingForwarder | None = None
        forwarder = baseline
        if cfg.routing.is_rl:
            forwarder = self.forwarder = self._build_rl_forwarder()
        self.network = Network(
            self.engine,
            self.topo,
            cfg.network.network_config(trace_path),
            seed=seeds.sim,
            forwarder=forwarder,
            background_forwarder=baseline,
            abort_on_fault=cfg.protocol == BASELINE,
        )
        self.transport = SimTransport(self.network)

        model = build_model(fl.model, data.d, data.classes, fl.hidden)
        training = fl.training_config()
        placements = fl.placements()
        self.aggregator = AggregatorNode(
            fl.server,
            self.transport,
            model,
            training,
            {wid: epochs[k] for k, (wid, _) in enumerate(placements)},
            eval_data=(self.dataset.X, self.dataset.y),
            init_rng=np.random.default_rng(seeds.model_init),
            payload_override=fl.payload_bytes,
            journal=self.journal,
        )
        self.workers = [
            WorkerNode(
                WorkerState(
                    wid,
                    self.shards[k],
                    router,
                    epochs[k],
                    rng=np.random.default_rng((seeds.model_init, k)),
                ),
                self.transport,
                model,
                training,
                fl.server,
                journal=self.journal,
            )
            for k, (wid, router) in enumerate(placements)
        ]
        self.aggregator.round_listeners.append(self._on_round)
        self.aggregator.finish_listeners.append(self.engine.stop)

    def _build_rl_forwarder(self) -> QRoutingForwarder:
        cfg = self.cfg
        server_router = cfg.fl.server_router
        pairs = set()
        for _, router in cfg.fl.placements():
            pairs.add((router, server_router))
            pairs.add((server_router, router))
        asm = NetworkController(self.topo, cfg.routing.refine()).action_spaces(pairs)
        agents = build_agents(
            self.topo,
            asm,
            cfg.routing.policy(cfg.seeds.rl),
            smoothing=cfg.routing.smoothing,
            hop_prior_ms=cfg.routing.hop_prior_ms,
        )
        if cfg.routing.qtable_init:
            rows = pd.read_parquet(cfg.routing.qtable_init)
            if "round" in rows and len(rows):
                rows = rows[rows["round"] == rows["round"].max()]
            records = rows.to_dict("records")
            loaded = sum(agent.restore(records) for agent in agents.values())
            logger.info("Warm-started %d action-values from %s", loaded, cfg.routing.qtable_init)
        return QRoutingForwarder(agents, report_period_ms=cfg.routing.report_period_ms)

    def _on_round(self, record: RoundRecord) -> None:
        self.log.rounds.append(record)
        if self.forwarder is not None:
            for row in self.forwarder.snapshot():
                self.log.qtables.append({"round": record.round, "time_ms": self.engine.now, **row})

    def run(self) -> MetricsLog:
        cfg = self.cfg
        logger.info(
            "Running %s (%s): %d workers, up to %d rounds", cfg.name, cfg.protocol, cfg.fl.worker_count, cfg.fl.max_rounds
        )
        self.network.start()
        for index, flow in enumerate(cfg.background):
            self.network.spawn_background(flow.spec(), (cfg.seeds.sim, 10_000 + index))
        for worker in self.workers:
            worker.register()
        try:
            self.engine.run(until=cfg.max_sim_time_ms)
        except RoutingFault as exc:
            raise RunAborted(f"{cfg.name}: routing fault under {cfg.protocol}: {exc}") from exc
        finally:
            self.network.close()
        if not self.aggregator.finished:
            raise RunAborted(
                f"{cfg.name}: simulated time ceiling of {cfg.max_sim_time_ms} ms reached after "
                f"{len(self.log.rounds)} rounds"
            )
        self.log.flows = self.network.stats.flows
        self.log.network = {**self.network.stats.as_dict(), "in_flight": self.network.live}
        logger.info(
            "Finished %s (%s): %d rounds in %.2f simulated minutes",
            cfg.name,
            cfg.protocol,
            len(self.log.rounds),
            self.log.total_ms / 60000.0,
        )
        return self.log


def run_experiment(cfg: ExperimentConfig, *, trace_path: Path | None = None) -> MetricsLog:
    return Simulation(cfg, trace_path=trace_path).run()


def time_to_target(log: MetricsLog, target_loss: float) -> float | None:
    """End time of the first round at or below `target_loss`; None when never reached."""
    for record in log.rounds:
        if record.loss <= target_loss:
            return record.end_ms
    return None


@dataclass
class ComparisonReport:
    reference: str
    target_loss: float
    times: dict[str, float | None]
    speedups: dict[str, float | None]
    curves_equal: bool

    def as_frame(self) -> pd.DataFrame:
        rows = []
        for protocol, t in self.times.items():
            rows.append(
                {
                    "protocol": protocol,
                    "time_to_target_ms": t,
                    "time_to_target_min": None if t is None else t / 60000.0,
                    "speedup": self.speedups[protocol],
                }
            )
        return pd.DataFrame(rows, columns=["protocol", "time_to_target_ms", "time_to_target_min", "speedup"])


def compare(logs: Mapping[str, MetricsLog], target_loss: float, *, reference: str = BASELINE) -> ComparisonReport:
    if not logs:
        raise ConfigError("Nothing to compare")
    fingerprints = {log.fingerprint for log in logs.values()}
    if len(fingerprints) != 1:
        raise ConfigError("Logs come from configurations that differ beyond the routing protocol")
    if reference not in logs:
        reference = next(iter(logs))
    times = {protocol: time_to_target(log, target_loss) for protocol, log in logs.items()}
    ref_time = times[reference]
    speedups = {
        protocol: (ref_time / t if ref_time is not None and t else None) for protocol, t in times.items()
    }
    curves = [log.losses for log in logs.values()]
    return ComparisonReport(reference, target_loss, times, speedups, all(c == curves[0] for c in curves))


def emit_metrics(log: MetricsLog, path: str | Path) -> Path:
    """Writes `<stem>.csv`, `<stem>_flows.csv` and, for RL runs, `<stem>_qtables.parquet`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    log.round_frame().to_csv(path, index=False)
    log.flow_frame().to_csv(path.with_name(f"{path.stem}_flows.csv"), index=False)
    if log.qtables:
        log.qtable_frame().to_parquet(path.with_name(f"{path.stem}_qtables.parquet"), index=False)
    return path


def read_metrics(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def _run_arm(cfg: ExperimentConfig, out_path: Path, target_loss: float | None) -> dict[str, Any]:
    log = run_experiment(cfg)
    emit_metrics(log, out_path)
    t = time_to_target(log, target_loss) if target_loss is not None else None
    return {
        **{k: v for k, v in log.summary().items() if k != "network"},
        "time_to_target_ms": t,
        "time_to_target_min": None if t is None else t / 60000.0,
        "losses_digest": zlib.crc32(np.asarray(log.losses).tobytes()),
    }


def sweep(
    preset: str | Preset,
    replicates: int,
    out_dir: str | Path,
    *,
    jobs: int = 1,
    seed: int | None = None,
    target_loss: float | None = None,
) -> pd.DataFrame:
    """Runs every variant x protocol x replicate and writes `summary.csv`.

    Replicate r sets every seed field to `seed + r`, where `seed` defaults to the
    preset's own simulation seed.
    """
    preset = load_preset(preset) if isinstance(preset, str) else preset
    if replicates < 1:
        raise ConfigError("replicates must be at least 1")
    out_dir = Path(out_dir)
    target = target_loss if target_loss is not None else preset.target_loss

    arms = []
    for variant in preset.variant_names:
        for protocol in preset.protocols:
            for replicate in range(replicates):
                cfg = preset.config(variant, protocol)
                base_seed = seed if seed is not None else cfg.seeds.sim
                cfg = cfg.with_seed(base_seed + replicate)
                path = out_dir / variant / f"{protocol}_r{replicate}.csv"
                arms.append(((variant, protocol, replicate), cfg, path))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_arm, cfg, path, target) for _, cfg, path in arms]
            results = [f.result() for f in futures]
    else:
        results = []
        for index, (key, cfg, path) in enumerate(arms, start=1):
            logger.info("Sweep %s: arm %d/%d %s", preset.name, index, len(arms), key)
            results.append(_run_arm(cfg, path, target))

    rows = []
    for ((variant, protocol, replicate), _, _), result in zip(arms, results):
        rows.append({"variant": variant, "protocol": protocol, "replicate": replicate, **result})
    summary = pd.DataFrame(rows)
    reference = summary[summary["protocol"] == BASELINE].set_index(["variant", "replicate"])["time_to_target_ms"]
    summary["speedup"] = [
        _speedup(reference.get((row.variant, row.replicate)), row.time_to_target_ms) for row in summary.itertuples()
    ]
    out_dir.mkdir(parents=True, exist_ok=True)
    summary.to_csv(out_dir / "summary.csv", index=False)
    return summary


def _speedup(reference: float | None, t: float | None) -> float | None:
    if reference is None or t is None or pd.isna(reference) or pd.isna(t) or t == 0:
        return None
    return reference / t
