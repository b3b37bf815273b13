"""Mesh topology, loop-free path enumeration and action-space refining.

Everything here is a pure function of immutable inputs. The refining pass runs
once before a simulation starts, at the logical network controller that owns the
global topology.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from itertools import pairwise
from typing import Any, Callable, Iterable, Literal, Mapping

import networkx as nx

from .config import DEFAULT_K_SHORTEST, EXHAUSTIVE_CEILING
from .errors import TopologyError

logger = logging.getLogger(__name__)

Path = tuple[str, ...]
ActionKey = tuple[str, str, str]  # (router, ingress, egress)
ActionSpaceMap = dict[ActionKey, frozenset[str]]

EXHAUSTIVE = "exhaustive-dfs"
K_SHORTEST = "k-shortest"
AUTO = "auto"


@dataclass(frozen=True)
class LinkSpec:
    """Undirected mesh link; the simulator instantiates one queue per direction."""

    a: str
    b: str
    capacity_bps: float
    proc_delay_ms: float
    jitter_ms: float = 0.0

    @property
    def key(self) -> frozenset[str]:
        return frozenset((self.a, self.b))


@dataclass(frozen=True)
class Topology:
    routers: tuple[str, ...]
    links: tuple[LinkSpec, ...]
    hosts: Mapping[str, str] = field(default_factory=dict)

    @cached_property
    def graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(self.routers)
        for link in self.links:
            graph.add_edge(link.a, link.b, spec=link)
        return graph

    @cached_property
    def _links_by_key(self) -> dict[frozenset[str], LinkSpec]:
        return {link.key: link for link in self.links}

    def __contains__(self, router: object) -> bool:
        return router in self.graph

    def neighbors(self, router: str) -> tuple[str, ...]:
        return tuple(sorted(self.graph.neighbors(router)))

    def link(self, a: str, b: str) -> LinkSpec:
        try:
            return self._links_by_key[frozenset((a, b))]
        except KeyError:
            raise TopologyError(f"No link between {a} and {b}") from None

    def directed_links(self) -> list[tuple[str, str, LinkSpec]]:
        """Both directions of every link, in declaration order."""
        out = []
        for link in self.links:
            out.append((link.a, link.b, link))
            out.append((link.b, link.a, link))
        return out

    def router_of(self, endpoint: str) -> str:
        try:
            return self.hosts[endpoint]
        except KeyError:
            raise TopologyError(f"Endpoint {endpoint!r} is not attached to any router") from None


@dataclass(frozen=True)
class RefineConfig:
    method: Literal["auto", "exhaustive-dfs", "k-shortest"] = AUTO
    k: int = DEFAULT_K_SHORTEST
    dag_filter: bool = True
    exhaustive_ceiling: int = EXHAUSTIVE_CEILING

    def __post_init__(self) -> None:
        if self.method not in (AUTO, EXHAUSTIVE, K_SHORTEST):
            raise TopologyError(f"Unknown refine method {self.method!r}")
        if self.k < 1:
            raise TopologyError(f"k must be at least 1, got {self.k}")


def _parse_link(entry: Any) -> LinkSpec:
    if isinstance(entry, Mapping):
        values = (
            entry.get("a"),
            entry.get("b"),
            entry.get("capacity_mbps"),
            entry.get("proc_delay_ms", 0.0),
            entry.get("jitter_ms", 0.0),
        )
    elif isinstance(entry, (list, tuple)) and len(entry) in (4, 5):
        values = (*entry, 0.0) if len(entry) == 4 else tuple(entry)
    else:
        raise TopologyError(
            f"Link entry {entry!r} must be (a, b, capacity_mbps, proc_delay_ms[, jitter_ms])"
        )
    a, b, capacity_mbps, proc_delay_ms, jitter_ms = values
    try:
        capacity_bps = float(capacity_mbps) * 1e6
        proc = float(proc_delay_ms)
        jitter = float(jitter_ms)
    except (TypeError, ValueError):
        raise TopologyError(f"Link entry {entry!r} has non-numeric values") from None
    return LinkSpec(str(a), str(b), capacity_bps, proc, jitter)


def build_topology(config: Mapping[str, Any]) -> Topology:
    """Validates the topology section of a scenario and returns the mesh."""
    routers_raw = config.get("routers") or []
    routers = [str(r) for r in routers_raw]
    if not routers:
        raise TopologyError("Topology lists no routers")
    if len(set(routers)) != len(routers):
        raise TopologyError("Topology lists a router more than once")
    router_set = set(routers)

    links: list[LinkSpec] = []
    seen: set[frozenset[str]] = set()
    for entry in config.get("links") or []:
        link = _parse_link(entry)
        for end in (link.a, link.b):
            if end not in router_set:
                raise TopologyError(f"Link {link.a}-{link.b} references unknown router {end!r}")
        if link.a == link.b:
            raise TopologyError(f"Link {link.a}-{link.b} is a self loop")
        if link.capacity_bps <= 0:
            raise TopologyError(f"Link {link.a}-{link.b} needs a positive capacity")
        if link.proc_delay_ms < 0 or link.jitter_ms < 0:
            raise TopologyError(f"Link {link.a}-{link.b} has a negative delay")
        if link.key in seen:
            raise TopologyError(f"Duplicate link {link.a}-{link.b}")
        seen.add(link.key)
        links.append(link)

    hosts: dict[str, str] = {}
    for endpoint, router in (config.get("hosts") or {}).items():
        if str(router) not in router_set:
            raise TopologyError(f"Host {endpoint!r} is attached to unknown router {router!r}")
        hosts[str(endpoint)] = str(router)

    topo = Topology(tuple(sorted(routers)), tuple(links), hosts)
    if not nx.is_connected(topo.graph):
        parts = sorted(sorted(c) for c in nx.connected_components(topo.graph))
        raise TopologyError(f"Topology is disconnected: components {parts}")
    return topo


def _path_order(path: Path) -> tuple[int, Path]:
    return (len(path), path)


def _resolve_method(topo: Topology, cfg: RefineConfig) -> str:
    if cfg.method != AUTO:
        return cfg.method
    return EXHAUSTIVE if len(topo.routers) <= cfg.exhaustive_ceiling else K_SHORTEST


def enumerate_loopfree_paths(
    topo: Topology, ingress: str, egress: str, cfg: RefineConfig = RefineConfig()
) -> tuple[Path, ...]:
    """Simple ingress→egress paths, ordered by hop count then router ids.

    Exhaustive mode returns every simple path; k-shortest mode returns the k
    minimum-hop ones. An empty tuple means no path exists.
    """
    if ingress == egress:
        raise TopologyError("Ingress and egress must differ")
    for router in (ingress, egress):
        if router not in topo:
            raise TopologyError(f"Unknown router {router!r}")

    if _resolve_method(topo, cfg) == EXHAUSTIVE:
        paths = [tuple(p) for p in nx.all_simple_paths(topo.graph, ingress, egress)]
        return tuple(sorted(paths, key=_path_order))

    # shortest_simple_paths yields in non-decreasing hop count; keep the whole tie
    # group at the k-th length so the lexicographic cut is exact.
    collected: list[Path] = []
    try:
        for raw in nx.shortest_simple_paths(topo.graph, ingress, egress):
            path = tuple(raw)
            if len(collected) >= cfg.k and len(path) > len(collected[cfg.k - 1]):
                break
            collected.append(path)
    except nx.NetworkXNoPath:
        return ()
    return tuple(sorted(collected, key=_path_order)[: cfg.k])


def refine_action_spaces(paths: Iterable[Path]) -> ActionSpaceMap:
    """Each router's actions are its successors over all paths that traverse it."""
    paths = list(paths)
    if not paths:
        return {}
    ends = {(p[0], p[-1]) for p in paths}
    if len(ends) != 1:
        raise TopologyError(f"Paths span several (ingress, egress) pairs: {sorted(ends)}")
    ingress, egress = ends.pop()

    spaces: dict[str, set[str]] = defaultdict(set)
    for path in paths:
        for router, successor in pairwise(path):
            spaces[router].add(successor)
    return {(r, ingress, egress): frozenset(spaces[r]) for r in sorted(spaces)}


def _back_edges(
    successors: Mapping[str, set[str]], roots: Iterable[str], order: Callable[[str], Any] = str
) -> list[tuple[str, str]]:
    on_stack, done = 1, 2
    state: dict[str, int] = {}
    back: list[tuple[str, str]] = []
    for root in roots:
        if root in state:
            continue
        state[root] = on_stack
        stack = [(root, iter(sorted(successors.get(root, ()), key=order)))]
        while stack:
            node, children = stack[-1]
            child = next(children, None)
            if child is None:
                state[node] = done
                stack.pop()
                continue
            seen = state.get(child)
            if seen == on_stack:
                back.append((node, child))
            elif seen is None:
                state[child] = on_stack
                stack.append((child, iter(sorted(successors.get(child, ()), key=order))))
    return back


def dag_filter(asm: ActionSpaceMap, topo: Topology, ingress: str, egress: str) -> ActionSpaceMap:
    """Prunes refined spaces of one (ingress, egress) pair down to a DAG.

    Back edges found by a depth-first search from the ingress are removed. Children
    are visited nearest-to-egress first, ties by router id, so the first branch is
    the min-hop path and survives as tree edges. Routers left without actions are
    then removed together with the actions pointing at them, so every walk ends at
    the egress.
    """
    if not asm:
        return {}
    successors: dict[str, set[str]] = {}
    for (router, i, e), actions in asm.items():
        if (i, e) != (ingress, egress):
            raise TopologyError(f"Action space for ({i}, {e}) passed to dag_filter({ingress}, {egress})")
        for action in actions:
            if action not in topo.neighbors(router):
                raise TopologyError(f"{action} is not a neighbour of {router}")
        successors[router] = set(actions)

    distances = nx.single_source_shortest_path_length(topo.graph, egress)
    roots = [ingress] + sorted(successors)
    for router, action in _back_edges(successors, roots, lambda r: (distances.get(r, math.inf), r)):
        successors[router].discard(action)
        logger.debug("dag_filter(%s->%s): pruned back edge %s->%s", ingress, egress, router, action)

    while True:
        dead = {r for r, actions in successors.items() if r != egress and not actions}
        dead |= {
            a for actions in successors.values() for a in actions if a != egress and a not in successors
        }
        if not dead:
            break
        for router in dead:
            successors.pop(router, None)
        for actions in successors.values():
            actions -= dead

    reachable = {ingress} if ingress in successors else set()
    frontier = list(reachable)
    while frontier:
        for nxt in successors.get(frontier.pop(), ()):
            if nxt not in reachable:
                reachable.add(nxt)
                frontier.append(nxt)
    if egress not in reachable:
        raise TopologyError(f"dag_filter disconnected {ingress} from {egress}")

    return {(r, ingress, egress): frozenset(successors[r]) for r in sorted(successors) if successors[r]}


def router_slice(asm: ActionSpaceMap, router: str) -> dict[tuple[str, str], tuple[str, ...]]:
    """The (ingress, egress) → sorted actions view a single router agent holds."""
    return {(i, e): tuple(sorted(actions)) for (r, i, e), actions in asm.items() if r == router}


class NetworkController:
    """Owns the global topology and computes refined action spaces before a run."""

    def __init__(self, topo: Topology, refine: RefineConfig = RefineConfig()):
        self.topo = topo
        self.refine = refine

    def action_spaces(self, pairs: Iterable[tuple[str, str]]) -> ActionSpaceMap:
        merged: ActionSpaceMap = {}
        for ingress, egress in sorted(set(pairs)):
            if ingress == egress:
                continue
            paths = enumerate_loopfree_paths(self.topo, ingress, egress, self.refine)
            if not paths:
                raise TopologyError(f"No loop-free path from {ingress} to {egress}")
            spaces = refine_action_spaces(paths)
            if self.refine.dag_filter:
                spaces = dag_filter(spaces, self.topo, ingress, egress)
            logger.debug(
                "Refined %s->%s over %d paths into %d router spaces", ingress, egress, len(paths), len(spaces)
            )
            merged.update(spaces)
        self._check_budget(merged)
        return merged

    def _check_budget(self, asm: ActionSpaceMap) -> None:
        budget = 2 * len(self.topo.routers)
        per_router: dict[str, int] = defaultdict(int)
        for router, _, _ in asm:
            per_router[router] += 1
        over = {r: n for r, n in per_router.items() if n > budget}
        if over:
            raise TopologyError(f"Routers exceed {budget} action spaces: {over}")
