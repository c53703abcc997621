"""Synthetic road network: perturbed grid, directed segments, and links.

A *segment* is a directed road piece ``u -> v``.  A *link* is a segment plus
the manoeuvre taken at its end node, identified by the node triple
``(u, v, w)`` where ``w`` is the next node, or ``-1`` when the route ends at
``v``.  Link ids are assigned in lexicographic ``(u, v, w)`` order, so
comparing two routes by their link-id sequences is the same as comparing
their node sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

ROAD_CLASSES = ("highway", "major", "minor", "slip", "private")
ACTIONS = ("forward", "left", "right", "u-turn")
HIGHWAY, MAJOR, MINOR, SLIP, PRIVATE = range(5)
FORWARD, LEFT, RIGHT, UTURN = range(4)

GRID_SPACING_KM = 0.25
JITTER = 0.20
DIAGONAL_RATE = 0.10
PRIVATE_RATE = 0.05
BASE_BLOCKED_RATE = 0.0
BAD_ROAD_RATE = 0.20
MINOR_LANE_PROBS = (0.05, 0.589, 0.361)  # 1, 2, 3 lanes
SPEED_KMH = np.array([80.0, 50.0, 30.0, 40.0, 15.0])
TOLL_PER_KM = np.array([0.6, 0.0, 0.0, 0.0, 0.0])
FORWARD_HALF_ANGLE = math.radians(35.0)

CORRUPT_BLOCKED, CORRUPT_LANES = 0, 1
CORRUPTION_KINDS = ("blocked", "lanes")


@dataclass(frozen=True)
class Link:
    """Read-only view of one link."""

    id: int
    u: int
    v: int
    w: int
    length_km: float
    lanes: int
    road_class: str
    action: str
    traffic_light: bool
    hidden_quality: float
    blocked_flag_true: bool
    blocked_flag_recorded: bool
    lanes_true: int


@dataclass
class RoadGraph:
    """Columnar road graph.

    Per-segment arrays are indexed by segment id, per-link arrays by link id.
    ``hidden_quality``, ``blocked_true`` and ``lanes_true`` are ground truth
    used by the simulator; they never enter model features.
    """

    coords: np.ndarray  # (N, 2) km
    seg_u: np.ndarray
    seg_v: np.ndarray
    seg_length: np.ndarray
    seg_class: np.ndarray
    seg_lanes: np.ndarray
    node_light: np.ndarray  # (N,) bool
    link_u: np.ndarray
    link_v: np.ndarray
    link_w: np.ndarray
    link_seg: np.ndarray
    link_action: np.ndarray
    lanes: np.ndarray  # recorded
    lanes_true: np.ndarray
    hidden_quality: np.ndarray
    blocked_true: np.ndarray
    blocked_recorded: np.ndarray
    corrupted: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    corruption_kind: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        self._build_indices()

    def _build_indices(self) -> None:
        self._derive()
        n = len(self.coords)
        self.succ: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        self.pred: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        self.segment_index: dict[tuple[int, int], int] = {}
        for s, (u, v) in enumerate(zip(self.seg_u.tolist(), self.seg_v.tolist())):
            if (u, v) in self.segment_index:
                raise ValueError(f"duplicate segment {u}->{v}")
            self.segment_index[(u, v)] = s
            self.succ[u].append((v, s))
            self.pred[v].append((u, s))
        for lst in self.succ:
            lst.sort()
        for lst in self.pred:
            lst.sort()
        self.link_index: dict[tuple[int, int, int], int] = {
            key: i
            for i, key in enumerate(
                zip(self.link_u.tolist(), self.link_v.tolist(), self.link_w.tolist())
            )
        }

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def n_links(self) -> int:
        return len(self.link_u)

    @property
    def n_segments(self) -> int:
        return len(self.seg_u)

    def _derive(self) -> None:
        self.link_length = self.seg_length[self.link_seg]
        self.link_class = self.seg_class[self.link_seg]
        self.link_traffic_light = self.node_light[self.link_v] & (self.link_w >= 0)
        self.free_flow_min = self.link_length / SPEED_KMH[self.link_class] * 60.0
        self.toll = self.link_length * TOLL_PER_KM[self.link_class]

    def link(self, i: int) -> Link:
        return Link(
            id=i,
            u=int(self.link_u[i]),
            v=int(self.link_v[i]),
            w=int(self.link_w[i]),
            length_km=float(self.link_length[i]),
            lanes=int(self.lanes[i]),
            road_class=ROAD_CLASSES[self.link_class[i]],
            action=ACTIONS[self.link_action[i]],
            traffic_light=bool(self.link_traffic_light[i]),
            hidden_quality=float(self.hidden_quality[i]),
            blocked_flag_true=bool(self.blocked_true[i]),
            blocked_flag_recorded=bool(self.blocked_recorded[i]),
            lanes_true=int(self.lanes_true[i]),
        )

    def links_for_path(self, nodes: list[int] | tuple[int, ...]) -> tuple[int, ...]:
        """Link ids of a node path (at least two nodes)."""
        idx = self.link_index
        out = [idx[(nodes[i], nodes[i + 1], nodes[i + 2])] for i in range(len(nodes) - 2)]
        out.append(idx[(nodes[-2], nodes[-1], -1)])
        return tuple(out)

    def nodes_for_links(self, link_ids) -> list[int]:
        ids = np.asarray(link_ids, dtype=np.int64)
        return self.link_u[ids].tolist() + [int(self.link_v[ids[-1]])]

    def is_strongly_connected(self) -> bool:
        n = self.n_nodes
        mat = csr_matrix((np.ones(self.n_segments), (self.seg_u, self.seg_v)), shape=(n, n))
        n_comp, _ = connected_components(mat, directed=True, connection="strong")
        return n_comp == 1

    def validate(self) -> None:
        n = self.n_nodes
        if self.seg_u.min(initial=0) < 0 or self.seg_v.max(initial=0) >= n:
            raise ValueError("segment endpoint outside node table")
        if np.any(self.seg_u == self.seg_v):
            raise ValueError("self-loop segment")
        if np.any((self.seg_length <= 0) | (self.seg_length > 2.0)):
            raise ValueError("segment length outside (0, 2] km")
        if np.any((self.lanes < 1) | (self.lanes > 10)):
            raise ValueError("lanes outside [1, 10]")
        if not np.array_equal(self.link_u, self.seg_u[self.link_seg]) or not np.array_equal(
            self.link_v, self.seg_v[self.link_seg]
        ):
            raise ValueError("link endpoints inconsistent with segments")


def _action(coords: np.ndarray, u: int, v: int, w: int) -> int:
    if w < 0:
        return FORWARD
    if w == u:
        return UTURN
    d1 = coords[v] - coords[u]
    d2 = coords[w] - coords[v]
    angle = math.atan2(d1[0] * d2[1] - d1[1] * d2[0], d1[0] * d2[0] + d1[1] * d2[1])
    if abs(angle) <= FORWARD_HALF_ANGLE:
        return FORWARD
    return LEFT if angle > 0 else RIGHT


def build_links(coords: np.ndarray, seg_u: np.ndarray, seg_v: np.ndarray):
    """Expand directed segments into ``(u, v, w)`` links sorted lexicographically.

    Returns ``(link_u, link_v, link_w, link_seg, link_action)``.
    """
    n = len(coords)
    out_nodes: list[list[int]] = [[] for _ in range(n)]
    for u, v in zip(seg_u.tolist(), seg_v.tolist()):
        out_nodes[u].append(v)
    seg_of = {(u, v): s for s, (u, v) in enumerate(zip(seg_u.tolist(), seg_v.tolist()))}
    rows = []
    for (u, v), s in seg_of.items():
        rows.append((u, v, -1, s))
        for w in out_nodes[v]:
            rows.append((u, v, w, s))
    rows.sort()
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    actions = np.array([_action(coords, u, v, w) for u, v, w, _ in rows], dtype=np.int64)
    return arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 3].copy(), actions


def from_segments(
    coords,
    segments,
    lengths=None,
    road_class=None,
    lanes=None,
    node_light=None,
) -> RoadGraph:
    """Build a clean (uncorrupted, unblocked) graph from explicit directed segments.

    Handy for tests and small hand-made networks.  Lengths default to the
    Euclidean distance between endpoints.
    """
    coords = np.asarray(coords, dtype=np.float64)
    segments = np.asarray(segments, dtype=np.int64).reshape(-1, 2)
    seg_u, seg_v = segments[:, 0].copy(), segments[:, 1].copy()
    if lengths is None:
        lengths = np.linalg.norm(coords[seg_v] - coords[seg_u], axis=1)
    lengths = np.asarray(lengths, dtype=np.float64)
    n_seg = len(seg_u)
    seg_class = np.full(n_seg, MINOR) if road_class is None else np.asarray(road_class)
    seg_lanes = np.full(n_seg, 2) if lanes is None else np.asarray(lanes)
    lights = np.zeros(len(coords), dtype=bool) if node_light is None else np.asarray(node_light)
    lu, lv, lw, ls, la = build_links(coords, seg_u, seg_v)
    n_links = len(lu)
    return RoadGraph(
        coords=coords,
        seg_u=seg_u,
        seg_v=seg_v,
        seg_length=lengths,
        seg_class=seg_class.astype(np.int64),
        seg_lanes=seg_lanes.astype(np.int64),
        node_light=lights.astype(bool),
        link_u=lu,
        link_v=lv,
        link_w=lw,
        link_seg=ls,
        link_action=la,
        lanes=seg_lanes[ls].astype(np.int64),
        lanes_true=seg_lanes[ls].astype(np.int64),
        hidden_quality=np.ones(n_links),
        blocked_true=np.zeros(n_links, dtype=bool),
        blocked_recorded=np.zeros(n_links, dtype=bool),
    )


def _line_class(index: int) -> int:
    if index % 12 == 6:
        return HIGHWAY
    if index % 4 == 0:
        return MAJOR
    return MINOR


def generate_network(n_rows: int, n_cols: int, seed: int, corruption_rate: float = 0.02) -> RoadGraph:
    """Generate a perturbed-grid road network with planted attribute corruption.

    Nodes sit on a grid with +-20% coordinate jitter; 10% of cells receive one
    diagonal.  Every undirected edge becomes two directed segments, and every
    segment is expanded into one link per outgoing manoeuvre plus a terminal
    link.  A ``corruption_rate`` fraction of links gets a recorded attribute
    that disagrees with the truth: either a blocked road recorded as passable
    or a one-lane road recorded with 3-5 lanes.  The corrupted ids are kept in
    ``graph.corrupted``.
    """
    if n_rows < 2 or n_cols < 2:
        raise ValueError("n_rows and n_cols must be >= 2")
    if not 0.0 <= corruption_rate <= 1.0:
        raise ValueError("corruption_rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)

    rr, cc = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    base = np.stack([cc.ravel(), rr.ravel()], axis=1).astype(np.float64) * GRID_SPACING_KM
    coords = base + rng.uniform(-JITTER, JITTER, size=base.shape) * GRID_SPACING_KM

    def nid(r, c):
        return r * n_cols + c

    edges: list[tuple[int, int, int]] = []
    for r in range(n_rows):
        for c in range(n_cols - 1):
            edges.append((nid(r, c), nid(r, c + 1), _line_class(r)))
    for r in range(n_rows - 1):
        for c in range(n_cols):
            edges.append((nid(r, c), nid(r + 1, c), _line_class(c)))
    diag_mask = rng.random((n_rows - 1, n_cols - 1)) < DIAGONAL_RATE
    diag_dir = rng.random((n_rows - 1, n_cols - 1)) < 0.5
    for r, c in zip(*np.nonzero(diag_mask)):
        near_highway = HIGHWAY in (_line_class(r), _line_class(r + 1), _line_class(c), _line_class(c + 1))
        cls = SLIP if near_highway else MINOR
        if diag_dir[r, c]:
            edges.append((nid(r, c), nid(r + 1, c + 1), cls))
        else:
            edges.append((nid(r, c + 1), nid(r + 1, c), cls))

    n_edges = len(edges)
    edge_class = np.array([e[2] for e in edges], dtype=np.int64)
    minor = edge_class == MINOR
    edge_class[minor & (rng.random(n_edges) < PRIVATE_RATE)] = PRIVATE
    lane_lo = np.array([3, 2, 1, 1, 1])[edge_class]
    lane_hi = np.array([5, 4, 3, 1, 1])[edge_class]
    edge_lanes = rng.integers(lane_lo, lane_hi + 1)
    is_minor = edge_class == MINOR
    edge_lanes[is_minor] = rng.choice([1, 2, 3], size=int(is_minor.sum()), p=MINOR_LANE_PROBS)
    eu = np.array([e[0] for e in edges], dtype=np.int64)
    ev = np.array([e[1] for e in edges], dtype=np.int64)
    euclid = np.linalg.norm(coords[ev] - coords[eu], axis=1)
    edge_len = np.clip(euclid * rng.uniform(1.0, 1.15, size=n_edges), 1e-3, 2.0)

    seg_u = np.concatenate([eu, ev])
    seg_v = np.concatenate([ev, eu])
    seg_length = np.concatenate([edge_len, edge_len])
    seg_class = np.concatenate([edge_class, edge_class])
    seg_lanes = np.concatenate([edge_lanes, edge_lanes])
    node_light = (rr.ravel() % 4 == 0) & (cc.ravel() % 4 == 0)

    lu, lv, lw, ls, la = build_links(coords, seg_u, seg_v)
    n_links = len(lu)
    bad = rng.random(n_links) < BAD_ROAD_RATE
    hidden_quality = np.where(bad, rng.uniform(0.0, 0.5, n_links), rng.uniform(0.8, 1.0, n_links))
    blocked_true = rng.random(n_links) < BASE_BLOCKED_RATE
    blocked_recorded = blocked_true.copy()
    lanes = seg_lanes[ls].astype(np.int64)
    lanes_true = lanes.copy()

    n_corrupt = int(round(corruption_rate * n_links))
    eligible = np.flatnonzero((la != UTURN) & ~blocked_true)
    n_corrupt = min(n_corrupt, len(eligible))
    corrupted = np.sort(rng.choice(eligible, size=n_corrupt, replace=False)) if n_corrupt else np.zeros(0, np.int64)
    kind = rng.integers(0, 2, size=n_corrupt)
    for i, k in zip(corrupted.tolist(), kind.tolist()):
        if k == CORRUPT_BLOCKED:
            blocked_true[i] = True
            blocked_recorded[i] = False
        else:
            lanes_true[i] = 1
            lanes[i] = int(rng.integers(3, 6))

    graph = RoadGraph(
        coords=coords,
        seg_u=seg_u,
        seg_v=seg_v,
        seg_length=seg_length,
        seg_class=seg_class,
        seg_lanes=seg_lanes,
        node_light=node_light,
        link_u=lu,
        link_v=lv,
        link_w=lw,
        link_seg=ls,
        link_action=la,
        lanes=lanes,
        lanes_true=lanes_true,
        hidden_quality=hidden_quality,
        blocked_true=blocked_true,
        blocked_recorded=blocked_recorded,
        corrupted=corrupted.astype(np.int64),
        corruption_kind=kind.astype(np.int64),
    )
    graph.validate()
    return graph
