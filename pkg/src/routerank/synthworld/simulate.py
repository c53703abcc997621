"""Navigation-log simulator.

Each record samples a user trip between two of the user's anchor places,
generates candidate routes, applies time-dependent traffic, lets the user
choose a candidate by a softmax over preference-weighted utility, and draws a
deviation with probability ``sigmoid(scale * disutility + logit(base))``.

Disutility mixes route-level terms that the model can observe (relative ETA
and distance, toll, highway share) with link-level quality that it cannot:
latent per-link quality, true blocked state, true lane count and a few local
manoeuvre patterns.  All terms are multiplied by user preference weights, so
a user whose weights are all zero chooses uniformly and deviates with the
base probability.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from routerank.candidates import (
    DEFAULT_K,
    MAX_LINK_ETA_MIN,
    TRAFFIC_SLOWDOWN,
    Route,
    _Router,
    _yen,
    default_cost,
)
from routerank.synthworld.network import HIGHWAY, LEFT, MAJOR, RIGHT, RoadGraph

N_PREFS = 5
PREF_NAMES = ("eta", "distance", "toll", "highway_affinity", "hidden_quality_sensitivity")


@dataclass
class SimConfig:
    n_days: int = 10
    k_candidates: int = DEFAULT_K
    max_route_links: int = 64
    base_deviation_prob: float = 0.18
    deviation_scale: float = 1.0
    choice_beta: float = 3.0
    n_anchor_nodes: int = 200
    anchor_radius_km: float = 3.0
    min_trip_km: float = 1.0
    # link quality cost: bad surface per km, narrow and blocked links per link
    bad_quality_per_km: float = 4.0
    narrow_cost: float = 6.0
    blocked_cost: float = 8.0
    unprotected_left_cost: float = 0.4
    dogleg_cost: float = 0.4
    dogleg_max_km: float = 0.25
    jam_cost: float = 0.5
    # traffic field
    rush_buckets: tuple[int, ...] = (2, 7)
    n_hotspots: int = 3
    hotspot_sigma_km: float = 1.0
    hotspot_amplitude: float = 4.0
    traffic_noise: float = 1.0
    congested_level: int = 6
    reroute_prob: float = 0.5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rush_buckets"] = list(self.rush_buckets)
        return d


@dataclass
class SimUser:
    user_id: int
    age_bucket: int
    preference: np.ndarray  # weights over PREF_NAMES
    deviation_count: int = 0
    anchors: tuple[int, ...] = ()
    activity: float = 1.0


@dataclass
class NavigationRecord:
    record_id: int
    user_id: int
    day: int
    timestamp_bucket: int
    origin: int
    destination: int
    candidates: list[Route]
    chosen_index: int
    first_index: int
    trajectory: Route
    similar_index: int
    label_y: int
    age_bucket: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def chosen(self) -> Route:
        return self.candidates[self.chosen_index]

    def validate(self) -> None:
        n = len(self.candidates)
        for name in ("chosen_index", "first_index", "similar_index"):
            if not 0 <= getattr(self, name) < n:
                raise ValueError(f"{name} out of range")
        if self.label_y not in (0, 1):
            raise ValueError("label_y must be 0 or 1")
        if (self.trajectory.link_ids != self.chosen.link_ids) != bool(self.label_y):
            raise ValueError("label_y inconsistent with trajectory")
        if not 0 <= self.timestamp_bucket <= 9:
            raise ValueError("timestamp_bucket outside [0, 9]")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def sample_users(graph: RoadGraph, n_users: int, rng: np.random.Generator, cfg: SimConfig) -> list[SimUser]:
    n_anchor = min(cfg.n_anchor_nodes, graph.n_nodes)
    anchor_nodes = np.sort(rng.choice(graph.n_nodes, size=n_anchor, replace=False))
    popularity = rng.pareto(1.5, size=n_anchor) + 1.0
    coords = graph.coords[anchor_nodes]
    users = []
    for uid in range(n_users):
        age = int(rng.integers(0, 10))
        home = int(rng.choice(n_anchor, p=popularity / popularity.sum()))
        dist = np.linalg.norm(coords - coords[home], axis=1)
        near = np.flatnonzero((dist <= cfg.anchor_radius_km) & (dist >= cfg.min_trip_km))
        if len(near) == 0:
            near = np.flatnonzero(np.arange(n_anchor) != home)
        w = popularity[near] / popularity[near].sum()
        n_other = min(len(near), int(rng.integers(1, 4)))
        others = rng.choice(near, size=n_other, replace=False, p=w)
        anchors = (int(anchor_nodes[home]),) + tuple(int(anchor_nodes[o]) for o in others)
        sens = float(np.exp(rng.normal(0.0, 0.5)) * (0.7 + 0.06 * age))
        pref = np.array(
            [
                rng.uniform(0.5, 2.0),  # eta
                rng.uniform(0.0, 1.0),  # distance
                rng.uniform(0.0, 1.5),  # toll
                rng.uniform(-1.0, 1.0),  # highway affinity
                sens,
            ]
        )
        users.append(SimUser(uid, age, pref, 0, anchors, float(rng.lognormal(0.0, 0.5))))
    return users


class _ODCache:
    """Candidate link sequences per origin/destination pair."""

    def __init__(self, graph: RoadGraph, cfg: SimConfig) -> None:
        self.graph = graph
        self.cfg = cfg
        self.router = _Router(graph, default_cost(graph))
        self.cache: dict[tuple[int, int], dict] = {}
        self.quality_per_km = _mean_quality_per_km(graph, cfg)

    def get(self, origin: int, destination: int) -> dict:
        key = (origin, destination)
        entry = self.cache.get(key)
        if entry is None:
            paths = _yen(self.graph, self.router, origin, destination, self.cfg.k_candidates)
            paths = [p for p in paths if len(p) <= self.cfg.max_route_links]
            lengths = np.array([len(p) for p in paths])
            flat = np.concatenate([np.asarray(p) for p in paths])
            unique, inverse = np.unique(flat, return_inverse=True)
            entry = {
                "paths": paths,
                "offsets": np.concatenate([[0], np.cumsum(lengths)[:-1]]),
                "flat": flat,
                "unique": unique,
                "inverse": inverse,
                "static": _static_link_terms(self.graph, self.cfg, flat, lengths, self.quality_per_km),
            }
            self.cache[key] = entry
        return entry


def _link_quality_cost(graph: RoadGraph, cfg: SimConfig, links: np.ndarray) -> np.ndarray:
    g = graph
    length = g.link_length[links]
    bad = length * (1.0 - g.hidden_quality[links]) * cfg.bad_quality_per_km
    narrow = (g.lanes_true[links] == 1) * cfg.narrow_cost
    return bad + narrow + g.blocked_true[links] * cfg.blocked_cost


def _mean_quality_per_km(graph: RoadGraph, cfg: SimConfig) -> float:
    """Network-average link quality cost per km, used to centre route quality."""
    links = np.flatnonzero(graph.link_w >= 0)
    return float(_link_quality_cost(graph, cfg, links).sum() / graph.link_length[links].sum())


def _static_link_terms(graph, cfg: SimConfig, flat: np.ndarray, lengths: np.ndarray, per_km: float) -> dict:
    g = graph
    length = g.link_length[flat]
    cls = g.link_class[flat]
    action = g.link_action[flat]
    bad = length * ((1.0 - g.hidden_quality[flat]) * cfg.bad_quality_per_km)
    unprotected = (
        (action == LEFT) & ~g.link_traffic_light[flat] & ((cls == MAJOR) | (cls == HIGHWAY))
    ) * cfg.unprotected_left_cost
    # dogleg: turn, then a short link, then a turn the other way
    nxt = np.roll(action, -1)
    nxt_len = np.roll(length, -1)
    ends = np.cumsum(lengths) - 1
    dog = ((action == LEFT) & (nxt == RIGHT)) | ((action == RIGHT) & (nxt == LEFT))
    dog &= nxt_len <= cfg.dogleg_max_km
    dog[ends] = False
    return {
        "length": length,
        "hidden": _link_quality_cost(g, cfg, flat) - per_km * length,
        "visible_hidden": bad,
        "pattern": unprotected + dog * cfg.dogleg_cost,
    }


class _TrafficField:
    def __init__(self, graph: RoadGraph, seed: int, cfg: SimConfig) -> None:
        self.graph = graph
        self.seed = seed
        self.cfg = cfg
        mid = 0.5 * (graph.coords[graph.link_u] + graph.coords[graph.link_v])
        self.mid = mid
        cls = graph.link_class
        self.base = np.array([2.0, 3.0, 1.0, 2.0, 0.0])[cls]
        self.rush = np.array([2.5, 2.5, 1.0, 1.5, 0.5])[cls]
        lo, hi = graph.coords.min(axis=0), graph.coords.max(axis=0)
        self.box = (lo, hi)
        self._hot: dict[tuple[int, int], np.ndarray] = {}

    def hotspots(self, day: int, bucket: int) -> np.ndarray:
        key = (day, bucket)
        if key not in self._hot:
            rng = np.random.default_rng([self.seed, 7919, day, bucket])
            lo, hi = self.box
            self._hot[key] = rng.uniform(lo, hi, size=(self.cfg.n_hotspots, 2))
        return self._hot[key]

    def levels(self, links: np.ndarray, day: int, bucket: int, rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        level = self.base[links] + (bucket in cfg.rush_buckets) * self.rush[links]
        for c in self.hotspots(day, bucket):
            d2 = ((self.mid[links] - c) ** 2).sum(axis=1)
            level = level + cfg.hotspot_amplitude * np.exp(-d2 / (2 * cfg.hotspot_sigma_km**2))
        level = level + rng.normal(0.0, cfg.traffic_noise, size=len(links))
        return np.clip(np.rint(level), 0, 9).astype(np.int64)


def _longest_runs(mask: np.ndarray, offsets: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(len(offsets), dtype=np.int64)
    bounds = list(offsets) + [n]
    for j in range(len(offsets)):
        best = run = 0
        for m in mask[bounds[j] : bounds[j + 1]]:
            run = run + 1 if m else 0
            best = max(best, run)
        out[j] = best
    return out


def route_disutility_terms(
    graph: RoadGraph, cfg: SimConfig, entry: dict, traffic: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-candidate preference features ``(deviation_z, choice_z, eta_total)``; z has shape (n, 5)."""
    st = entry["static"]
    offsets = entry["offsets"]
    flat = entry["flat"]
    eta = np.clip(graph.free_flow_min[flat] * (1.0 + TRAFFIC_SLOWDOWN * traffic), 1e-6, MAX_LINK_ETA_MIN)
    eta_tot = np.add.reduceat(eta, offsets)
    dist = np.add.reduceat(st["length"], offsets)
    toll = np.add.reduceat(graph.toll[flat], offsets)
    hw = np.add.reduceat(st["length"] * (graph.link_class[flat] == HIGHWAY), offsets)
    jam_run = _longest_runs(traffic >= cfg.congested_level, offsets, len(flat))
    hidden = np.add.reduceat(st["hidden"], offsets)
    pattern = np.add.reduceat(st["pattern"], offsets)
    quality = hidden + pattern + cfg.jam_cost * np.maximum(jam_run - 2, 0)
    base = np.stack(
        [
            (eta_tot - eta_tot.min()) / eta_tot.min(),
            (dist - dist.min()) / dist.min(),
            toll,
            -hw / dist,
        ],
        axis=1,
    )
    dev_z = np.concatenate([base, quality[:, None]], axis=1)
    visible = np.add.reduceat(st["visible_hidden"], offsets)
    choice_z = np.concatenate([base, 0.5 * visible[:, None]], axis=1)
    return dev_z, choice_z, eta_tot


def _jaccard_best(traj: tuple[int, ...], paths: list[tuple[int, ...]]) -> int:
    t = set(traj)
    best, best_j = -1.0, 0
    for j, p in enumerate(paths):
        s = set(p)
        score = len(t & s) / len(t | s)
        if score > best:
            best, best_j = score, j
    return best_j


def _reroute(
    graph: RoadGraph, router: _Router, nodes: list[int], destination: int, rng: np.random.Generator
) -> tuple[int, ...] | None:
    j = int(rng.integers(0, len(nodes) - 1))
    banned_seg = {graph.segment_index[(nodes[j], nodes[j + 1])]}
    spur = router.shortest_nodes(nodes[j], destination, frozenset(nodes[:j]), banned_seg)
    if spur is None:
        return None
    return graph.links_for_path(nodes[:j] + spur)


def simulate_logs(
    graph: RoadGraph,
    n_users: int,
    n_records: int,
    seed: int,
    cfg: SimConfig | None = None,
    users: list[SimUser] | None = None,
) -> tuple[list[NavigationRecord], list[SimUser]]:
    """Simulate ``n_records`` navigation events for ``n_users`` users.

    Records are returned in chronological order ``(day, bucket, user)`` and
    numbered accordingly, so each user's history is the prefix of their
    records.  Randomness for record ``i`` comes from the substream
    ``(seed, i)``.  Passing ``users`` overrides the sampled population.
    """
    if n_users < 1 or n_records < 1:
        raise ValueError("n_users and n_records must be >= 1")
    cfg = cfg or SimConfig()
    rng = np.random.default_rng(seed)
    if users is None:
        users = sample_users(graph, n_users, rng, cfg)
    else:
        users = [SimUser(u.user_id, u.age_bucket, np.asarray(u.preference, float), 0, u.anchors, u.activity) for u in users]
    activity = np.array([u.activity for u in users])
    rec_user = rng.choice(len(users), size=n_records, p=activity / activity.sum())
    rec_day = rng.integers(0, cfg.n_days, size=n_records)
    bucket_w = np.ones(10)
    bucket_w[list(cfg.rush_buckets)] = 3.0
    rec_bucket = rng.choice(10, size=n_records, p=bucket_w / bucket_w.sum())
    od_draw = rng.random((n_records, 2))
    order = np.lexsort((np.arange(n_records), rec_user, rec_bucket, rec_day))

    cache = _ODCache(graph, cfg)
    traffic_field = _TrafficField(graph, seed, cfg)
    b = logit(cfg.base_deviation_prob)
    records: list[NavigationRecord] = []
    for rid, src in enumerate(order.tolist()):
        user = users[rec_user[src]]
        anchors = user.anchors
        a = int(od_draw[src, 0] * len(anchors))
        rest = [x for i, x in enumerate(anchors) if i != a]
        o = anchors[a]
        d = rest[int(od_draw[src, 1] * len(rest))] if rest else anchors[a]
        if o == d:
            raise RuntimeError("user has a single anchor")
        day, bucket = int(rec_day[src]), int(rec_bucket[src])
        rr = np.random.default_rng([seed, rid])
        records.append(_simulate_one(graph, cfg, cache, traffic_field, b, rid, user, o, d, day, bucket, rr))
    for u in users:
        u.deviation_count = 0
    for r in records:
        users[r.user_id].deviation_count += r.label_y
    return records, users


def _simulate_one(graph, cfg, cache, traffic_field, b, rid, user, o, d, day, bucket, rr) -> NavigationRecord:
    entry = cache.get(o, d)
    paths = entry["paths"]
    traffic_u = traffic_field.levels(entry["unique"], day, bucket, rr)
    traffic = traffic_u[entry["inverse"]]
    dev_z, choice_z, eta_tot = route_disutility_terms(graph, cfg, entry, traffic)
    pref = user.preference
    util = -cfg.choice_beta * (choice_z @ pref)
    p = np.exp(util - util.max())
    p /= p.sum()
    chosen = int(rr.choice(len(paths), p=p))
    disutility = float(dev_z[chosen] @ pref)
    p_dev = float(sigmoid(cfg.deviation_scale * disutility + b))
    y = int(rr.random() < p_dev)

    offsets = entry["offsets"]
    lookup = dict(zip(entry["unique"].tolist(), traffic_u.tolist()))
    candidates = [
        Route(path, traffic[off : off + len(path)].astype(np.uint8).tobytes())
        for path, off in zip(paths, offsets.tolist())
    ]
    first = int(np.argmin(eta_tot))

    traj_links = paths[chosen]
    if y:
        alt = None
        if rr.random() < cfg.reroute_prob:
            alt = _reroute(graph, cache.router, graph.nodes_for_links(paths[chosen]), d, rr)
            if alt is not None and (alt == paths[chosen] or len(alt) > cfg.max_route_links):
                alt = None
        if alt is None and len(paths) > 1:
            others = [j for j in range(len(paths)) if j != chosen]
            alt = paths[others[int(rr.integers(len(others)))]]
        if alt is None:
            y = 0
        else:
            traj_links = alt
    missing = [l for l in traj_links if l not in lookup]
    if missing:
        extra = traffic_field.levels(np.asarray(missing), day, bucket, rr)
        lookup.update(zip(missing, extra.tolist()))
    trajectory = Route(tuple(traj_links), np.array([lookup[l] for l in traj_links], dtype=np.uint8).tobytes())
    similar = chosen if not y else _jaccard_best(traj_links, paths)
    return NavigationRecord(
        record_id=rid,
        user_id=user.user_id,
        day=day,
        timestamp_bucket=bucket,
        origin=o,
        destination=d,
        candidates=candidates,
        chosen_index=chosen,
        first_index=first,
        trajectory=trajectory,
        similar_index=similar,
        label_y=y,
        age_bucket=user.age_bucket,
        meta={"p_dev": p_dev},
    )
