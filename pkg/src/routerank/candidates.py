"""Candidate route generation: Dijkstra/A* primitive and Yen's k-shortest paths.

Routing runs on the node graph.  Costs are supplied per link but must not
depend on the manoeuvre, i.e. all links sharing a segment carry the same
cost; the routing cost of a segment is then well defined and a node-simple
path of minimum segment cost is a minimum-cost loopless route.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from routerank.synthworld.network import HIGHWAY, LEFT, RIGHT, UTURN, RoadGraph

DEFAULT_K = 19
MAX_K = 150
TRAFFIC_SLOWDOWN = 0.3
CONGESTED_LEVEL = 6
MAX_LINK_ETA_MIN = 120.0
_TIE_RTOL = 1e-12


class UnreachableError(ValueError):
    """No loopless route exists between the requested nodes."""


@dataclass(frozen=True, slots=True)
class Route:
    """An ordered link sequence plus its per-link traffic levels (0-9).

    An empty ``traffic`` means free flow on every link.  Per-link ETA and the
    route aggregates are derived from the graph by :func:`link_eta` and
    :func:`route_stats`.
    """

    link_ids: tuple[int, ...]
    traffic: bytes = b""

    def __post_init__(self) -> None:
        if not self.link_ids:
            raise ValueError("route must contain at least one link")
        if self.traffic and len(self.traffic) != len(self.link_ids):
            raise ValueError("traffic length differs from route length")

    def __len__(self) -> int:
        return len(self.link_ids)

    def traffic_levels(self) -> np.ndarray:
        if not self.traffic:
            return np.zeros(len(self.link_ids), dtype=np.int64)
        return np.frombuffer(self.traffic, dtype=np.uint8).astype(np.int64)

    def with_traffic(self, levels) -> "Route":
        levels = np.asarray(levels)
        if np.any((levels < 0) | (levels > 9)):
            raise ValueError("traffic level outside [0, 9]")
        return Route(self.link_ids, levels.astype(np.uint8).tobytes())


@dataclass(frozen=True)
class RouteStats:
    distance_km: float
    eta_min_total: float
    toll: float
    n_traffic_lights: int
    n_turns: int
    highway_km: float
    congested_km: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.distance_km,
                self.eta_min_total,
                self.toll,
                self.n_traffic_lights,
                self.n_turns,
                self.highway_km,
                self.congested_km,
            ]
        )


def link_eta(graph: RoadGraph, route: Route) -> np.ndarray:
    """Per-link ETA in minutes under the route's traffic levels."""
    ids = np.asarray(route.link_ids)
    eta = graph.free_flow_min[ids] * (1.0 + TRAFFIC_SLOWDOWN * route.traffic_levels())
    return np.clip(eta, 1e-6, MAX_LINK_ETA_MIN)


def route_stats(graph: RoadGraph, route: Route) -> RouteStats:
    ids = np.asarray(route.link_ids)
    length = graph.link_length[ids]
    traffic = route.traffic_levels()
    action = graph.link_action[ids]
    return RouteStats(
        distance_km=float(math.fsum(length)),
        eta_min_total=float(math.fsum(link_eta(graph, route))),
        toll=float(graph.toll[ids].sum()),
        n_traffic_lights=int(graph.link_traffic_light[ids].sum()),
        n_turns=int(np.isin(action, (LEFT, RIGHT, UTURN)).sum()),
        highway_km=float(length[graph.link_class[ids] == HIGHWAY].sum()),
        congested_km=float(length[traffic >= CONGESTED_LEVEL].sum()),
    )


def check_route(graph: RoadGraph, route: Route, origin: int | None = None, destination: int | None = None) -> None:
    """Raise ``ValueError`` unless ``route`` is a connected loopless route."""
    ids = route.link_ids
    for a, b in zip(ids[:-1], ids[1:]):
        if graph.link_v[a] != graph.link_u[b] or graph.link_w[a] != graph.link_v[b]:
            raise ValueError(f"links {a} and {b} are not consecutive")
    if graph.link_w[ids[-1]] != -1:
        raise ValueError("route must end with a terminal link")
    nodes = graph.nodes_for_links(ids)
    if len(set(nodes)) != len(nodes):
        raise ValueError("route repeats a node")
    if origin is not None and nodes[0] != origin:
        raise ValueError("route does not start at origin")
    if destination is not None and nodes[-1] != destination:
        raise ValueError("route does not end at destination")


def default_cost(graph: RoadGraph) -> np.ndarray:
    """Length-based link cost used for candidate generation."""
    return graph.link_length.copy()


def segment_costs(graph: RoadGraph, cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (graph.n_links,):
        raise ValueError(f"cost must have shape ({graph.n_links},)")
    if not np.all(cost > 0) or not np.all(np.isfinite(cost)):
        raise ValueError("costs must be finite and > 0")
    seg_cost = np.empty(graph.n_segments)
    seg_cost[graph.link_seg] = cost
    if not np.array_equal(seg_cost[graph.link_seg], cost):
        raise ValueError("link costs must not depend on the manoeuvre (one cost per segment)")
    return seg_cost


class _Router:
    """Shortest-path searches over one graph and one cost assignment."""

    def __init__(self, graph: RoadGraph, cost) -> None:
        self.graph = graph
        self.cost = np.asarray(cost, dtype=np.float64)
        self.seg_cost = segment_costs(graph, cost)
        self.seg_cost_list = self.seg_cost.tolist()
        self.xs = graph.coords[:, 0].tolist()
        self.ys = graph.coords[:, 1].tolist()
        euclid = np.linalg.norm(graph.coords[graph.seg_v] - graph.coords[graph.seg_u], axis=1)
        if graph.n_segments and np.all(euclid > 1e-9):
            # consistent A* heuristic: cost >= scale * straight-line distance
            self.scale = float(np.min(self.seg_cost / euclid)) * (1.0 - 1e-9)
        else:
            self.scale = 0.0

    def path_cost(self, link_ids) -> float:
        total = 0.0
        for i in link_ids:
            total += self.cost[i]
        return float(total)

    def shortest_nodes(self, source: int, target: int, banned_nodes=frozenset(), banned_segs=frozenset()):
        """Lexicographically smallest minimum-cost node path, or None.

        A reverse A* from ``target`` computes exact distances-to-target for all
        nodes that can lie on an optimal path; a greedy forward walk then
        picks the smallest next node that stays on an optimal path.
        """
        pred = self.graph.pred
        seg_cost = self.seg_cost_list
        xs, ys = self.xs, self.ys
        sx, sy = xs[source], ys[source]
        scale = self.scale
        hypot = math.hypot
        push, pop = heapq.heappush, heapq.heappop

        g = {target: 0.0}
        settled: dict[int, float] = {}
        heap = [(scale * hypot(xs[target] - sx, ys[target] - sy), 0.0, target)]
        bound = math.inf
        while heap:
            f, gd, x = pop(heap)
            if f > bound:
                break
            if x in settled:
                continue
            settled[x] = gd
            if x == source:
                bound = f + _TIE_RTOL * max(1.0, abs(f))
                continue
            for p, s in pred[x]:
                if p in settled or p in banned_nodes or (p == source and s in banned_segs):
                    continue
                nd = gd + seg_cost[s]
                if nd < g.get(p, math.inf):
                    g[p] = nd
                    push(heap, (nd + scale * hypot(xs[p] - sx, ys[p] - sy), nd, p))
        if source not in settled:
            return None

        succ = self.graph.succ

        path = [source]
        x = source
        while x != target:
            dx = settled[x]
            tol = _TIE_RTOL * max(1.0, dx)
            nxt = None
            for v, s in succ[x]:
                if v in banned_nodes or (x == source and s in banned_segs):
                    continue
                dv = settled.get(v)
                if dv is not None and dv + seg_cost[s] <= dx + tol:
                    nxt = v
                    break
            if nxt is None:  # pragma: no cover - guarded by the search invariant
                raise RuntimeError("greedy walk left the shortest-path DAG")
            path.append(nxt)
            x = nxt
        return path


def _check_endpoints(graph: RoadGraph, origin: int, destination: int) -> None:
    n = graph.n_nodes
    if not (0 <= origin < n and 0 <= destination < n):
        raise ValueError("origin/destination outside the graph")
    if origin == destination:
        raise ValueError("origin and destination must differ")


def shortest_path(graph: RoadGraph, origin: int, destination: int, cost=None) -> Route:
    """Minimum-cost loopless route; ties go to the smallest link-id sequence."""
    _check_endpoints(graph, origin, destination)
    router = _Router(graph, default_cost(graph) if cost is None else cost)
    nodes = router.shortest_nodes(origin, destination)
    if nodes is None:
        raise UnreachableError(f"no route from {origin} to {destination}")
    return Route(graph.links_for_path(nodes))


def k_shortest(graph: RoadGraph, origin: int, destination: int, K: int = DEFAULT_K, cost=None) -> list[Route]:
    """Up to ``K`` distinct loopless routes in nondecreasing cost (Yen's algorithm).

    Equal-cost routes are ordered by their link-id sequences.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    _check_endpoints(graph, origin, destination)
    router = _Router(graph, default_cost(graph) if cost is None else cost)
    return [Route(links) for links in _yen(graph, router, origin, destination, K)]


def _yen(graph: RoadGraph, router: _Router, origin: int, destination: int, K: int) -> list[tuple[int, ...]]:
    first = router.shortest_nodes(origin, destination)
    if first is None:
        raise UnreachableError(f"no route from {origin} to {destination}")
    accepted_nodes = [first]
    deviation = [0]
    accepted = [graph.links_for_path(first)]
    seen = {accepted[0]}
    pool: list[tuple[float, tuple[int, ...], list[int], int]] = []
    seg_index = graph.segment_index
    while len(accepted) < K:
        prev = accepted_nodes[-1]
        # Lawler: spurs before the deviation node reproduce earlier candidates
        for i in range(deviation[-1], len(prev) - 1):
            root = prev[: i + 1]
            spur = prev[i]
            banned_segs = {
                seg_index[(p[i], p[i + 1])] for p in accepted_nodes if len(p) > i + 1 and p[: i + 1] == root
            }
            spur_nodes = router.shortest_nodes(spur, destination, frozenset(root[:-1]), banned_segs)
            if spur_nodes is None:
                continue
            total = root[:-1] + spur_nodes
            links = graph.links_for_path(total)
            if links in seen:
                continue
            seen.add(links)
            heapq.heappush(pool, (router.path_cost(links), links, total, i))
        if not pool:
            break
        _, links, nodes, dev = heapq.heappop(pool)
        accepted.append(links)
        accepted_nodes.append(nodes)
        deviation.append(dev)
    return accepted
