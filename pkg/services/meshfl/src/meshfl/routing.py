"""Per-router forwarding: min-hop baseline and multi-agent Q-routing.

Each router runs its own agent. An agent's action-values estimate the (negative)
remaining delivery delay of a flow when forwarded to a given next hop. The
downstream router computes the sample r_i + max_a Q_{i+1} from the telemetry it
pops and reports it back upstream on a periodic timer.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass
from enum import StrEnum
from typing import Any, Iterable, Mapping, Sequence

import networkx as nx
import numpy as np

from .config import DEFAULT_REPORT_PERIOD_MS
from .errors import ConfigError, RoutingFault
from .simnet import FlowKey, Network, Packet
from .topology import ActionSpaceMap, Topology, router_slice

logger = logging.getLogger(__name__)


class PolicyKind(StrEnum):
    GREEDY = "greedy"
    EPSILON = "epsilon-greedy-decay"
    SOFTMAX = "softmax"
    UNIFORM = "uniform"


BASELINE = "baseline"
PROTOCOLS: dict[str, PolicyKind | None] = {
    BASELINE: None,
    "rl-greedy": PolicyKind.GREEDY,
    "rl-softmax": PolicyKind.SOFTMAX,
    "rl-epsilon": PolicyKind.EPSILON,
}


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind = PolicyKind.GREEDY
    alpha: float = 0.7
    epsilon0: float = 0.5
    decay_beta: float = 0.9
    tau: float = 2.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0 < self.epsilon0 <= 1:
            raise ConfigError(f"epsilon0 must lie in (0, 1], got {self.epsilon0}")
        if not 0 < self.decay_beta < 1:
            raise ConfigError(f"decay_beta must lie in (0, 1), got {self.decay_beta}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


def epsilon_at(policy: PolicyConfig, now_ms: float) -> float:
    """Exploration rate after `now_ms` simulated milliseconds."""
    return policy.epsilon0 * policy.decay_beta ** (now_ms / 1000.0)


class RouterAgent:
    def __init__(
        self,
        router: str,
        actions: Mapping[tuple[str, str], Sequence[str]],
        policy: PolicyConfig,
        hosts: Mapping[str, str],
        *,
        smoothing: float | None = None,
        rng: np.random.Generator | None = None,
        priors: Mapping[tuple[str, str], Mapping[str, float]] | None = None,
    ):
        self.router = router
        self.actions = {key: tuple(sorted(acts)) for key, acts in actions.items()}
        self.policy = policy
        self.hosts = hosts
        self.smoothing = policy.alpha if smoothing is None else smoothing
        if not 0 < self.smoothing <= 1:
            raise ConfigError(f"smoothing must lie in (0, 1], got {self.smoothing}")
        self.rng = rng if rng is not None else np.random.default_rng((policy.rng_seed, zlib.crc32(router.encode())))
        self.qtable: dict[tuple[FlowKey, str], float] = {}
        self.neighbor_estimates: dict[tuple[FlowKey, str], float] = {}
        self._fresh: set[tuple[FlowKey, str]] = set()
        self.priors = {key: dict(values) for key, values in (priors or {}).items()}

    def __repr__(self) -> str:
        return f"RouterAgent({self.router!r}, {self.policy.kind}, {len(self.qtable)} values)"

    def action_space(self, obs: FlowKey) -> tuple[str, ...]:
        try:
            key = (self.hosts[obs.src], self.hosts[obs.dst])
        except KeyError as exc:
            raise RoutingFault(f"{self.router}: endpoint {exc.args[0]!r} is not attached") from None
        return self.actions.get(key, ())

    def q(self, obs: FlowKey, action: str) -> float:
        value = self.qtable.get((obs, action))
        if value is not None:
            return value
        if not self.priors:
            return 0.0
        key = (self.hosts.get(obs.src), self.hosts.get(obs.dst))
        return self.priors.get(key, {}).get(action, 0.0)

    def q_values(self, obs: FlowKey) -> np.ndarray:
        return np.array([self.q(obs, a) for a in self.action_space(obs)], dtype=float)

    def best_value(self, obs: FlowKey) -> float:
        values = self.q_values(obs)
        return float(values.max()) if values.size else 0.0

    def snapshot(self) -> list[dict[str, Any]]:
        return [
            {"router": self.router, "src": obs.src, "dst": obs.dst, "next_hop": action, "q": value}
            for (obs, action), value in sorted(self.qtable.items())
        ]

    def restore(self, rows: Iterable[Mapping[str, Any]]) -> int:
        """Loads action-values for this router; rows outside the action space are skipped."""
        loaded = 0
        for row in rows:
            if row["router"] != self.router:
                continue
            obs = FlowKey(str(row["src"]), str(row["dst"]))
            action = str(row["next_hop"])
            value = float(row["q"])
            if action in self.action_space(obs) and math.isfinite(value):
                self.qtable[(obs, action)] = value
                loaded += 1
        return loaded


def hop_priors(
    topo: Topology, actions: Mapping[tuple[str, str], Sequence[str]], hop_prior_ms: float
) -> dict[tuple[str, str], dict[str, float]]:
    """Starting action-values of -hop_prior_ms per hop from the next hop to the egress, the hop into it included."""
    if hop_prior_ms <= 0:
        raise ConfigError(f"hop_prior_ms must be positive, got {hop_prior_ms}")
    priors: dict[tuple[str, str], dict[str, float]] = {}
    for (ingress, egress), acts in actions.items():
        distances = nx.single_source_shortest_path_length(topo.graph, egress)
        priors[(ingress, egress)] = {a: -hop_prior_ms * (1 + distances[a]) for a in acts if a in distances}
    return priors


def build_agents(
    topo: Topology,
    asm: ActionSpaceMap,
    policy: PolicyConfig,
    *,
    smoothing: float | None = None,
    hop_prior_ms: float | None = None,
) -> dict[str, RouterAgent]:
    agents = {}
    for router in topo.routers:
        actions = router_slice(asm, router)
        priors = hop_priors(topo, actions, hop_prior_ms) if hop_prior_ms is not None else None
        agents[router] = RouterAgent(router, actions, policy, topo.hosts, smoothing=smoothing, priors=priors)
    return agents


def observe(pkt: Packet) -> FlowKey:
    return pkt.flow


def action_probabilities(agent: RouterAgent, obs: FlowKey, now: float) -> np.ndarray:
    """Behaviour distribution over `agent.action_space(obs)` (sorted order)."""
    values = agent.q_values(obs)
    n = values.size
    if n == 0:
        raise RoutingFault(f"{agent.router} has no action for {obs}")
    kind = agent.policy.kind
    if kind is PolicyKind.UNIFORM:
        return np.full(n, 1.0 / n)
    if kind is PolicyKind.SOFTMAX:
        z = values / agent.policy.tau
        weights = np.exp(z - z.max())
        return weights / weights.sum()
    probs = np.zeros(n)
    greedy = int(np.argmax(values))
    if kind is PolicyKind.GREEDY or n == 1:
        probs[greedy] = 1.0
        return probs
    eps = epsilon_at(agent.policy, now)
    probs[:] = eps / (n - 1)
    probs[greedy] = 1.0 - eps
    return probs


def select_action(agent: RouterAgent, obs: FlowKey, now: float) -> str:
    actions = agent.action_space(obs)
    if not actions:
        raise RoutingFault(f"{agent.router} has no action for {obs}")
    if agent.policy.kind is PolicyKind.GREEDY:
        # argmax keeps the first maximum, i.e. the lexicographically smallest next hop
        return actions[int(np.argmax(agent.q_values(obs)))]
    cdf = np.cumsum(action_probabilities(agent, obs, now))
    index = int(np.searchsorted(cdf, agent.rng.random() * cdf[-1], side="right"))
    return actions[min(index, len(actions) - 1)]


def update_q(agent: RouterAgent, obs: FlowKey, action: str, sample: float) -> float:
    if action not in agent.action_space(obs):
        raise RoutingFault(f"{action} is outside the action space of {agent.router} for {obs}")
    if not math.isfinite(sample):
        raise RoutingFault(f"Non-finite sample {sample} for {agent.router} -> {action}")
    old = agent.q(obs, action)
    new = old + agent.policy.alpha * (sample - old)
    agent.qtable[(obs, action)] = new
    return new


def downstream_accumulate(agent: RouterAgent, obs: FlowKey, upstream: str, delay_ms: float) -> float:
    """Folds one popped telemetry delay into the estimate reported to `upstream`."""
    at_egress = agent.router == agent.hosts.get(obs.dst)
    sample = -delay_ms + (0.0 if at_egress else agent.best_value(obs))
    key = (obs, upstream)
    previous = agent.neighbor_estimates.get(key)
    estimate = sample if previous is None else previous + agent.smoothing * (sample - previous)
    agent.neighbor_estimates[key] = estimate
    agent._fresh.add(key)
    return estimate


def report_estimates(agent: RouterAgent, now: float) -> list[tuple[str, FlowKey, float]]:
    """Estimates refreshed since the previous report, as (upstream, obs, estimate)."""
    report = sorted(
        ((upstream, obs, agent.neighbor_estimates[(obs, upstream)]) for obs, upstream in agent._fresh),
        key=lambda item: (item[0], item[1]),
    )
    agent._fresh.clear()
    return report


class BaselineRoutingTable:
    """Min-hop distance-vector next hops with lexicographic tie-break."""

    def __init__(self, topo: Topology):
        self.topo = topo
        self._distances = dict(nx.all_pairs_shortest_path_length(topo.graph))
        self._cache: dict[tuple[str, str], str] = {}

    def next_hop(self, router: str, dst_router: str) -> str:
        key = (router, dst_router)
        if key not in self._cache:
            self._cache[key] = _min_hop_neighbor(self.topo, router, dst_router, self._distances.get(dst_router))
        return self._cache[key]


def _min_hop_neighbor(topo: Topology, router: str, dst_router: str, distances: Mapping[str, int] | None) -> str:
    if router == dst_router:
        raise RoutingFault(f"{router} is already the destination router")
    if not distances or router not in distances:
        raise RoutingFault(f"{dst_router} is unreachable from {router}")
    for neighbor in topo.neighbors(router):
        if distances.get(neighbor) == distances[router] - 1:
            return neighbor
    raise RoutingFault(f"{dst_router} is unreachable from {router}")


def baseline_next_hop(topo: Topology, router: str, dst_router: str) -> str:
    if dst_router not in topo:
        raise RoutingFault(f"Unknown destination router {dst_router!r}")
    distances = nx.single_source_shortest_path_length(topo.graph, dst_router)
    return _min_hop_neighbor(topo, router, dst_router, distances)


class BaselineForwarder:
    def __init__(self, topo: Topology):
        self.table = BaselineRoutingTable(topo)

    def start(self, network: Network) -> None:
        pass

    def next_hop(self, router: str, pkt: Packet, now: float) -> str:
        return self.table.next_hop(router, self.table.topo.router_of(pkt.flow.dst))

    def on_hop(self, router: str, upstream: str, pkt: Packet, delay_ms: float, now: float) -> None:
        pass


class QRoutingForwarder:
    """Drives one agent per router and the periodic estimate reports between them.

    Reports travel back over the reverse link as control stubs and only pay that
    link's processing delay.
    """

    def __init__(self, agents: Mapping[str, RouterAgent], *, report_period_ms: float = DEFAULT_REPORT_PERIOD_MS):
        if report_period_ms <= 0:
            raise ConfigError("report_period_ms must be positive")
        self.agents = dict(agents)
        self.report_period_ms = report_period_ms
        self.network: Network | None = None
        self.reports: list[tuple[float, str, int]] = []
        self.updates = 0

    def start(self, network: Network) -> None:
        self.network = network
        first = network.engine.now + self.report_period_ms
        for router in sorted(self.agents):
            network.engine.post_event(first, self._report, router, label=f"report:{router}")

    def next_hop(self, router: str, pkt: Packet, now: float) -> str:
        return select_action(self.agents[router], observe(pkt), now)

    def on_hop(self, router: str, upstream: str, pkt: Packet, delay_ms: float, now: float) -> None:
        downstream_accumulate(self.agents[router], observe(pkt), upstream, delay_ms)

    def _report(self, router: str) -> None:
        engine = self.network.engine
        now = engine.now
        entries = report_estimates(self.agents[router], now)
        for upstream, obs, estimate in entries:
            link = self.network.link(router, upstream)
            engine.post_event(now + link.proc_delay_ms, self._apply, upstream, obs, router, estimate)
        if entries:
            logger.debug("%s reported %d estimates at %.1f ms", router, len(entries), now)
        self.reports.append((now, router, len(entries)))
        engine.post_event(now + self.report_period_ms, self._report, router, label=f"report:{router}")

    def _apply(self, upstream: str, obs: FlowKey, action: str, estimate: float) -> None:
        update_q(self.agents[upstream], obs, action, estimate)
        self.updates += 1

    def snapshot(self) -> list[dict[str, Any]]:
        return [row for router in sorted(self.agents) for row in self.agents[router].snapshot()]
