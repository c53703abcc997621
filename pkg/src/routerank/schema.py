"""Feature schema, link vocabulary, embedding layer and feature assembly.

Seven feature domains feed the model:

========  =====================================================================
``f_c``   context: time bucket, origin/destination distance, candidate ETA and
          distance relative to the best candidate of the same request
``f_u``   user: age bucket, number of earlier deviations, number of earlier trips
``f_r``   route aggregates (see :class:`routerank.candidates.RouteStats`)
``p_id``  link id, through :class:`Vocab`
``l_s``   link static: lanes, length, road class, action, blocked flag, light
``l_d``   link dynamic: traffic level, link ETA
``l_p``   link position: cumulative km from the origin, fractional rank i/M
========  =====================================================================

Discrete features are embedded with one table per feature (shared by every
domain that uses the feature); continuous ones are z-scored with training
statistics and clipped to [-10, 10].  Composite vectors concatenate domains:
``f_s = l_e + l_d + l_p``, ``f_d = l_s + l_d + l_p`` and
``f_e = f_c + f_r(first) + f_r(chosen) + f_r(similar) + f_r(trajectory)``.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from routerank.candidates import CONGESTED_LEVEL, MAX_LINK_ETA_MIN, TRAFFIC_SLOWDOWN
from routerank.synthworld.network import ACTIONS, HIGHWAY, LEFT, RIGHT, ROAD_CLASSES, UTURN, RoadGraph
from routerank.synthworld.simulate import NavigationRecord

LINK_EMBED_DIM = 32
MIN_FREQUENCY = 5
HISTORY_LEN = 30
MAX_ROUTE_LINKS = 64
CLIP = 10.0
PAD_INDEX = 0
UNK_INDEX = 1

DOMAINS = ("f_c", "f_u", "f_r", "l_s", "l_d", "l_p")
COMPOSITES = {
    "f_s": ("p_id", "l_d", "l_p"),
    "f_d": ("l_s", "l_d", "l_p"),
    "f_e": ("f_c", "f_r", "f_r", "f_r", "f_r"),
}


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # "discrete" | "continuous"
    cardinality: int = 0
    embedding_dim: int = 0
    stats: tuple[float, float, float, float] | None = None  # min, max, mean, std

    def __post_init__(self) -> None:
        if self.kind == "discrete":
            if self.cardinality < 1 or self.embedding_dim < 1:
                raise ValueError(f"{self.name}: cardinality and embedding_dim must be >= 1")
        elif self.kind == "continuous":
            if self.stats is not None and not self.stats[3] > 0:
                raise ValueError(f"{self.name}: std must be > 0")
        else:
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")

    @property
    def width(self) -> int:
        return self.embedding_dim if self.kind == "discrete" else 1


def _d(name, card, dim):
    return FeatureSpec(name, "discrete", card, dim)


def _c(name):
    return FeatureSpec(name, "continuous")


ROUTE_FEATURES = ("distance_km", "eta_min", "toll", "n_traffic_lights", "n_turns", "highway_km", "congested_km")


def _default_domains() -> dict[str, tuple[FeatureSpec, ...]]:
    return {
        "f_c": (_d("time_bucket", 10, 4), _c("od_distance_km"), _c("eta_rel_best"), _c("distance_rel_best")),
        "f_u": (_d("age_bucket", 10, 4), _c("prev_deviations"), _c("prev_trips")),
        "f_r": tuple(_c(n) for n in ROUTE_FEATURES),
        "l_s": (
            _d("lanes", 11, 4),
            _c("link_length_km"),
            _d("road_class", len(ROAD_CLASSES), 4),
            _d("action", len(ACTIONS), 4),
            _d("blocked_recorded", 2, 2),
            _d("traffic_light", 2, 2),
        ),
        "l_d": (_d("traffic_level", 10, 4), _c("link_eta_min")),
        "l_p": (_c("cum_distance_km"), _c("position_frac")),
    }


@dataclass(frozen=True)
class FeatureSchema:
    """Per-domain feature descriptors in concatenation order."""

    domains: dict[str, tuple[FeatureSpec, ...]] = field(default_factory=_default_domains)
    link_embed_dim: int = LINK_EMBED_DIM

    def features(self, domain: str) -> tuple[FeatureSpec, ...]:
        if domain not in self.domains:
            raise KeyError(f"unknown domain {domain!r}")
        return self.domains[domain]

    def discrete(self, domain: str) -> list[FeatureSpec]:
        return [f for f in self.features(domain) if f.kind == "discrete"]

    def continuous(self, domain: str) -> list[FeatureSpec]:
        return [f for f in self.features(domain) if f.kind == "continuous"]

    def dim(self, domain: str) -> int:
        if domain == "p_id":
            return self.link_embed_dim
        if domain in COMPOSITES:
            return sum(self.dim(d) for d in COMPOSITES[domain])
        return sum(f.width for f in self.features(domain))

    def tables(self) -> dict[str, FeatureSpec]:
        out: dict[str, FeatureSpec] = {}
        for specs in self.domains.values():
            for f in specs:
                if f.kind == "discrete":
                    out.setdefault(f.name, f)
        return out

    @property
    def fitted(self) -> bool:
        return all(f.stats is not None for specs in self.domains.values() for f in specs if f.kind == "continuous")

    def with_stats(self, stats: dict[str, tuple[float, float, float, float]]) -> "FeatureSchema":
        domains = {
            d: tuple(replace(f, stats=tuple(map(float, stats[f.name]))) if f.kind == "continuous" else f for f in specs)
            for d, specs in self.domains.items()
        }
        return FeatureSchema(domains, self.link_embed_dim)

    def to_dict(self) -> dict:
        return {
            "link_embed_dim": self.link_embed_dim,
            "domains": {
                d: [
                    {
                        "name": f.name,
                        "kind": f.kind,
                        "cardinality": f.cardinality,
                        "embedding_dim": f.embedding_dim,
                        "stats": list(f.stats) if f.stats is not None else None,
                    }
                    for f in specs
                ]
                for d, specs in self.domains.items()
            },
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureSchema":
        domains = {
            d: tuple(
                FeatureSpec(
                    f["name"],
                    f["kind"],
                    f["cardinality"],
                    f["embedding_dim"],
                    tuple(f["stats"]) if f["stats"] is not None else None,
                )
                for f in specs
            )
            for d, specs in obj["domains"].items()
        }
        return cls(domains, int(obj["link_embed_dim"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- vocabulary


@dataclass
class Vocab:
    """Link id to embedding row.  Row 0 is padding, row 1 is the UNK token."""

    index: dict[int, int]
    frequency: dict[int, int]
    min_frequency: int = MIN_FREQUENCY
    pad_index: int = PAD_INDEX
    unk_index: int = UNK_INDEX

    def __post_init__(self) -> None:
        keys = np.array(sorted(self.index), dtype=np.int64)
        self._keys = keys
        self._rows = np.array([self.index[k] for k in keys.tolist()], dtype=np.int64)

    @property
    def size(self) -> int:
        """Number of embedding rows including padding and UNK."""
        return len(self.index) + 2

    def lookup(self, link_id: int) -> int:
        return self.index.get(int(link_id), self.unk_index)

    def lookup_many(self, link_ids) -> np.ndarray:
        ids = np.asarray(link_ids, dtype=np.int64)
        if len(self._keys) == 0:
            return np.full(ids.shape, self.unk_index, dtype=np.int64)
        pos = np.clip(np.searchsorted(self._keys, ids), 0, len(self._keys) - 1)
        hit = self._keys[pos] == ids
        return np.where(hit, self._rows[pos], self.unk_index)

    def to_dict(self) -> dict:
        return {
            "min_frequency": self.min_frequency,
            "index": [[k, v] for k, v in sorted(self.index.items())],
            "frequency": [[k, v] for k, v in sorted(self.frequency.items())],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Vocab":
        return cls(
            index={int(k): int(v) for k, v in obj["index"]},
            frequency={int(k): int(v) for k, v in obj["frequency"]},
            min_frequency=int(obj["min_frequency"]),
        )


def build_vocab(training_records, min_frequency: int = MIN_FREQUENCY) -> Vocab:
    """Count link occurrences over the candidate routes of ``training_records``.

    Each candidate (the chosen one included) contributes one count per link.
    Links seen fewer than ``min_frequency`` times fall back to UNK.  Rows are
    assigned by descending frequency, ties by ascending link id.
    """
    records = list(training_records)
    if not records:
        raise ValueError("cannot build a vocabulary from no records")
    freq: Counter[int] = Counter()
    for rec in records:
        for cand in rec.candidates:
            freq.update(cand.link_ids)
    kept = sorted((k for k, v in freq.items() if v >= min_frequency), key=lambda k: (-freq[k], k))
    index = {k: i + 2 for i, k in enumerate(kept)}
    return Vocab(index=index, frequency=dict(freq), min_frequency=min_frequency)


# ------------------------------------------------------------- elementwise


def normalize_continuous(x, stats) -> np.ndarray | float:
    """``(x - mean) / std`` clipped to [-10, 10]; ``stats`` is (min, max, mean, std)."""
    mean, std = stats[2], stats[3]
    if not std > 0:
        raise ValueError("std must be > 0")
    out = np.clip((np.asarray(x, dtype=np.float64) - mean) / std, -CLIP, CLIP)
    return float(out) if out.ndim == 0 else out


def embed_discrete(table: np.ndarray, index) -> np.ndarray:
    idx = np.asarray(index)
    if np.any((idx < 0) | (idx >= table.shape[0])):
        raise IndexError("embedding index out of range")
    return table[idx]


def embed_discrete_backward(table_shape, index, dout: np.ndarray) -> np.ndarray:
    """Scatter-add of the upstream gradient into a zero table."""
    grad = np.zeros(table_shape)
    np.add.at(grad, np.asarray(index).reshape(-1), dout.reshape(-1, table_shape[1]))
    return grad


def fit_stats(values: np.ndarray) -> tuple[float, float, float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return (0.0, 0.0, 0.0, 1.0)
    std = float(v.std())
    return (float(v.min()), float(v.max()), float(v.mean()), std if std > 1e-12 else 1.0)


# ---------------------------------------------------------- domain vectors


def table_name(feature: str) -> str:
    return f"emb/{feature}"


def domain_forward(params, schema: FeatureSchema, domain: str, disc: np.ndarray, cont: np.ndarray) -> np.ndarray:
    """Embed discretes and interleave with (already normalized) continuous values.

    ``disc`` has shape (..., n_discrete) and ``cont`` (..., n_continuous) in
    declaration order; the output has shape (..., schema.dim(domain)).
    """
    pieces = []
    i = j = 0
    for f in schema.features(domain):
        if f.kind == "discrete":
            pieces.append(params[table_name(f.name)][disc[..., i]])
            i += 1
        else:
            pieces.append(cont[..., j : j + 1])
            j += 1
    return np.concatenate(pieces, axis=-1)


def domain_backward(params, grads, schema: FeatureSchema, domain: str, disc: np.ndarray, dout: np.ndarray) -> None:
    """Accumulate embedding-table gradients for ``domain`` into ``grads``."""
    i = col = 0
    for f in schema.features(domain):
        w = f.width
        if f.kind == "discrete":
            name = table_name(f.name)
            np.add.at(grads[name], disc[..., i].reshape(-1), dout[..., col : col + w].reshape(-1, w))
            i += 1
        col += w


@dataclass
class FeatureVector:
    domain: str
    values: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature vector has non-finite entries")


# --------------------------------------------------------- raw extraction


def _route_arrays(graph: RoadGraph, routes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat link ids, traffic levels and route offsets for a list of routes."""
    lengths = np.fromiter((len(r.link_ids) for r in routes), dtype=np.int64, count=len(routes))
    ids = np.fromiter((l for r in routes for l in r.link_ids), dtype=np.int64, count=int(lengths.sum()))
    traffic = np.zeros(len(ids), dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64) if len(routes) else np.zeros(0, np.int64)
    for r, off in zip(routes, offsets.tolist()):
        if r.traffic:
            traffic[off : off + len(r.link_ids)] = np.frombuffer(r.traffic, dtype=np.uint8)
    return ids, traffic, offsets


def _link_eta(graph: RoadGraph, ids: np.ndarray, traffic: np.ndarray) -> np.ndarray:
    return np.clip(graph.free_flow_min[ids] * (1.0 + TRAFFIC_SLOWDOWN * traffic), 1e-6, MAX_LINK_ETA_MIN)


def route_feature_table(graph: RoadGraph, routes) -> np.ndarray:
    """Raw ``f_r`` rows, shape (len(routes), 7)."""
    if not routes:
        return np.zeros((0, len(ROUTE_FEATURES)))
    ids, traffic, offsets = _route_arrays(graph, routes)
    length = graph.link_length[ids]
    action = graph.link_action[ids]
    cols = [
        length,
        _link_eta(graph, ids, traffic),
        graph.toll[ids],
        graph.link_traffic_light[ids].astype(np.float64),
        np.isin(action, (LEFT, RIGHT, UTURN)).astype(np.float64),
        length * (graph.link_class[ids] == HIGHWAY),
        length * (traffic >= CONGESTED_LEVEL),
    ]
    return np.stack([np.add.reduceat(c, offsets) for c in cols], axis=1)


@dataclass
class RawLinks:
    """Padded per-link raw features for a batch of routes, shape (n, M, ...)."""

    link_id: np.ndarray  # graph link ids, -1 at padding
    ls_disc: np.ndarray  # lanes, road_class, action, blocked_recorded, traffic_light
    ls_cont: np.ndarray  # length
    ld_disc: np.ndarray  # traffic level
    ld_cont: np.ndarray  # link eta
    lp_cont: np.ndarray  # cumulative km, i/M
    mask: np.ndarray


def link_feature_arrays(graph: RoadGraph, routes, max_len: int | None = None) -> RawLinks:
    ids, traffic, offsets = _route_arrays(graph, routes)
    n = len(routes)
    lengths = np.diff(np.concatenate([offsets, [len(ids)]])) if n else np.zeros(0, np.int64)
    m = int(lengths.max(initial=1)) if max_len is None else max_len
    if lengths.max(initial=0) > m:
        raise ValueError(f"route longer than {m} links")
    row = np.repeat(np.arange(n), lengths)
    pos = np.arange(len(ids)) - np.repeat(offsets, lengths)
    length = graph.link_length[ids]
    cum = np.cumsum(length)
    cum = cum - np.repeat(cum[offsets] - length[offsets], lengths)

    def pad(values, shape_tail=(), dtype=np.float64, fill=0):
        out = np.full((n, m) + shape_tail, fill, dtype=dtype)
        out[row, pos] = values
        return out

    ls_disc = np.stack(
        [
            graph.lanes[ids],
            graph.link_class[ids],
            graph.link_action[ids],
            graph.blocked_recorded[ids].astype(np.int64),
            graph.link_traffic_light[ids].astype(np.int64),
        ],
        axis=1,
    )
    return RawLinks(
        link_id=pad(ids, dtype=np.int64, fill=-1),
        ls_disc=pad(ls_disc, (5,), np.int64),
        ls_cont=pad(length[:, None], (1,)),
        ld_disc=pad(traffic[:, None], (1,), np.int64),
        ld_cont=pad(_link_eta(graph, ids, traffic)[:, None], (1,)),
        lp_cont=pad(np.stack([cum, (pos + 1) / np.repeat(lengths, lengths)], axis=1), (2,)),
        mask=pad(np.ones(len(ids), bool), dtype=bool, fill=False),
    )


def history_index(records: list[NavigationRecord], T: int = HISTORY_LEN):
    """Per record: indices of the user's latest ``T`` earlier records, plus counts.

    Returns ``(hist, hist_mask, prev_deviations, prev_trips)``; ``hist`` has
    shape (n, T) with the most recent record last and -1 at padding.
    Records must be in chronological order.
    """
    n = len(records)
    hist = np.full((n, T), -1, dtype=np.int64)
    prev_dev = np.zeros(n)
    prev_trips = np.zeros(n)
    seen: dict[int, list[int]] = {}
    devs: dict[int, int] = {}
    for i, rec in enumerate(records):
        past = seen.setdefault(rec.user_id, [])
        recent = past[-T:] if T > 0 else []
        if recent:
            hist[i, T - len(recent) :] = recent
        prev_dev[i] = devs.get(rec.user_id, 0)
        prev_trips[i] = len(past)
        past.append(i)
        devs[rec.user_id] = devs.get(rec.user_id, 0) + rec.label_y
    return hist, hist >= 0, prev_dev, prev_trips


@dataclass
class RawSamples:
    """Unnormalized model inputs for (record, candidate) pairs."""

    record_pos: np.ndarray
    cand_index: np.ndarray
    y: np.ndarray
    ctx_disc: np.ndarray
    ctx_cont: np.ndarray
    usr_disc: np.ndarray
    usr_cont: np.ndarray
    rte_cont: np.ndarray
    links: RawLinks
    hist: np.ndarray
    hist_mask: np.ndarray
    item_disc: np.ndarray  # history items: f_c discretes of the chosen route
    item_cont: np.ndarray  # f_c continuous, then f_r of first/chosen/similar/trajectory


class FeatureExtractor:
    """Turns navigation records into raw feature arrays for one graph."""

    def __init__(self, graph: RoadGraph, history_len: int = HISTORY_LEN, max_route_links: int = MAX_ROUTE_LINKS):
        self.graph = graph
        self.history_len = history_len
        self.max_route_links = max_route_links

    def _context(self, records, rec_pos, rte, cand_tables) -> tuple[np.ndarray, np.ndarray]:
        g = self.graph
        disc = np.array([[records[p].timestamp_bucket] for p in rec_pos.tolist()], dtype=np.int64).reshape(-1, 1)
        o = np.array([records[p].origin for p in rec_pos.tolist()], dtype=np.int64)
        d = np.array([records[p].destination for p in rec_pos.tolist()], dtype=np.int64)
        od = np.linalg.norm(g.coords[o] - g.coords[d], axis=1)
        best = np.array([cand_tables[p].min(axis=0) for p in rec_pos.tolist()]).reshape(-1, 2)
        eta_rel = (rte[:, 1] - best[:, 1]) / best[:, 1]
        dist_rel = (rte[:, 0] - best[:, 0]) / best[:, 0]
        return disc, np.stack([od, eta_rel, dist_rel], axis=1)

    def candidate_tables(self, records) -> list[np.ndarray]:
        """Per record: (distance, eta) of every candidate."""
        routes = [c for r in records for c in r.candidates]
        table = route_feature_table(self.graph, routes)[:, :2]
        out, k = [], 0
        for r in records:
            out.append(table[k : k + len(r.candidates)])
            k += len(r.candidates)
        return out

    def items(self, records, cand_tables) -> tuple[np.ndarray, np.ndarray]:
        """History-item raw features ``f_e`` for every record."""
        pos = np.arange(len(records))
        roles = []
        for r in records:
            roles += [r.candidates[r.first_index], r.chosen, r.candidates[r.similar_index], r.trajectory]
        rt = route_feature_table(self.graph, roles).reshape(len(records), 4 * len(ROUTE_FEATURES))
        chosen_rt = rt[:, len(ROUTE_FEATURES) : 2 * len(ROUTE_FEATURES)]
        disc, cont = self._context(records, pos, chosen_rt, cand_tables)
        return disc, np.concatenate([cont, rt], axis=1)

    def extract(self, records: list[NavigationRecord], pairs=None, max_len: int | None = None) -> RawSamples:
        """Raw features for ``pairs`` of (record position, candidate index).

        Defaults to the chosen candidate of every record.  ``records`` must be
        the full chronological list so that histories are complete.
        """
        if pairs is None:
            pairs = [(i, r.chosen_index) for i, r in enumerate(records)]
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        rec_pos, cand_idx = pairs[:, 0], pairs[:, 1]
        cand_tables = self.candidate_tables(records)
        routes = [records[p].candidates[c] for p, c in pairs.tolist()]
        rte = route_feature_table(self.graph, routes)
        ctx_disc, ctx_cont = self._context(records, rec_pos, rte, cand_tables)
        hist, hist_mask, prev_dev, prev_trips = history_index(records, self.history_len)
        usr_disc = np.array([records[p].age_bucket for p in rec_pos.tolist()], dtype=np.int64).reshape(-1, 1)
        usr_cont = np.stack([prev_dev[rec_pos], prev_trips[rec_pos]], axis=1)
        item_disc, item_cont = self.items(records, cand_tables)
        y = np.array(
            [records[p].label_y if c == records[p].chosen_index else -1 for p, c in pairs.tolist()], dtype=np.int64
        )
        return RawSamples(
            record_pos=rec_pos,
            cand_index=cand_idx,
            y=y,
            ctx_disc=ctx_disc,
            ctx_cont=ctx_cont,
            usr_disc=usr_disc,
            usr_cont=usr_cont,
            rte_cont=rte,
            links=link_feature_arrays(self.graph, routes, max_len or None),
            hist=hist[rec_pos],
            hist_mask=hist_mask[rec_pos],
            item_disc=item_disc,
            item_cont=item_cont,
        )


# --------------------------------------------------------------- encoding


@dataclass
class Encoded:
    """Normalized model inputs; link ids replaced by vocabulary rows."""

    y: np.ndarray
    record_pos: np.ndarray
    cand_index: np.ndarray
    ctx_disc: np.ndarray
    ctx_cont: np.ndarray
    usr_disc: np.ndarray
    usr_cont: np.ndarray
    rte_cont: np.ndarray
    link_row: np.ndarray
    ls_disc: np.ndarray
    ls_cont: np.ndarray
    ld_disc: np.ndarray
    ld_cont: np.ndarray
    lp_cont: np.ndarray
    mask: np.ndarray
    hist: np.ndarray
    hist_mask: np.ndarray
    item_disc: np.ndarray
    item_cont: np.ndarray

    _PER_SAMPLE = (
        "y",
        "record_pos",
        "cand_index",
        "ctx_disc",
        "ctx_cont",
        "usr_disc",
        "usr_cont",
        "rte_cont",
        "link_row",
        "ls_disc",
        "ls_cont",
        "ld_disc",
        "ld_cont",
        "lp_cont",
        "mask",
        "hist",
        "hist_mask",
    )

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx, trim: bool = True) -> "Encoded":
        """Subset of samples; link arrays are trimmed to the longest route kept."""
        idx = np.asarray(idx)
        parts = {k: getattr(self, k)[idx] for k in self._PER_SAMPLE}
        if trim and len(idx):
            m = max(1, int(parts["mask"].sum(axis=1).max()))
            for k in ("link_row", "ls_disc", "ls_cont", "ld_disc", "ld_cont", "lp_cont", "mask"):
                parts[k] = parts[k][:, :m]
        return Encoded(**parts, item_disc=self.item_disc, item_cont=self.item_cont)


def _norm_cols(x: np.ndarray, specs: list[FeatureSpec]) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    for j, f in enumerate(specs):
        out[..., j] = normalize_continuous(x[..., j], f.stats)
    return out


def fit_schema(raw: RawSamples, schema: FeatureSchema | None = None) -> FeatureSchema:
    """Continuous-feature statistics from (training) raw samples."""
    schema = schema or FeatureSchema()
    m = raw.links.mask
    values: dict[str, np.ndarray] = {}
    for j, f in enumerate(schema.continuous("f_c")):
        values[f.name] = raw.ctx_cont[:, j]
    for j, f in enumerate(schema.continuous("f_u")):
        values[f.name] = raw.usr_cont[:, j]
    for j, f in enumerate(schema.continuous("f_r")):
        values[f.name] = raw.rte_cont[:, j]
    for dom, arr in (("l_s", raw.links.ls_cont), ("l_d", raw.links.ld_cont), ("l_p", raw.links.lp_cont)):
        for j, f in enumerate(schema.continuous(dom)):
            values[f.name] = arr[..., j][m]
    return schema.with_stats({k: fit_stats(v) for k, v in values.items()})


def encode(raw: RawSamples, schema: FeatureSchema, vocab: Vocab) -> Encoded:
    if not schema.fitted:
        raise ValueError("schema has no normalization statistics")
    lk = raw.links
    row = np.where(lk.mask, vocab.lookup_many(np.where(lk.mask, lk.link_id, 0)), PAD_INDEX)
    fc = schema.continuous("f_c")
    fr = schema.continuous("f_r")
    item_cont = np.concatenate(
        [_norm_cols(raw.item_cont[:, : len(fc)], fc)]
        + [_norm_cols(raw.item_cont[:, len(fc) + k * len(fr) : len(fc) + (k + 1) * len(fr)], fr) for k in range(4)],
        axis=1,
    )
    zero_pad = ~lk.mask[..., None]
    return Encoded(
        y=raw.y,
        record_pos=raw.record_pos,
        cand_index=raw.cand_index,
        ctx_disc=raw.ctx_disc,
        ctx_cont=_norm_cols(raw.ctx_cont, fc),
        usr_disc=raw.usr_disc,
        usr_cont=_norm_cols(raw.usr_cont, schema.continuous("f_u")),
        rte_cont=_norm_cols(raw.rte_cont, fr),
        link_row=row,
        ls_disc=lk.ls_disc,
        ls_cont=np.where(zero_pad, 0.0, _norm_cols(lk.ls_cont, schema.continuous("l_s"))),
        ld_disc=lk.ld_disc,
        ld_cont=np.where(zero_pad, 0.0, _norm_cols(lk.ld_cont, schema.continuous("l_d"))),
        lp_cont=np.where(zero_pad, 0.0, _norm_cols(lk.lp_cont, schema.continuous("l_p"))),
        mask=lk.mask,
        hist=raw.hist,
        hist_mask=raw.hist_mask,
        item_disc=raw.item_disc,
        item_cont=item_cont,
    )


# ----------------------------------------------------------- single vector


def composite_forward(params, schema: FeatureSchema, which: str, enc: Encoded):
    """Batch vectors for one domain or composite from encoded inputs.

    Link-level domains return shape (n, M, dim); ``f_e`` returns (n_items, dim).
    """
    if which == "f_c":
        return domain_forward(params, schema, "f_c", enc.ctx_disc, enc.ctx_cont)
    if which == "f_u":
        return domain_forward(params, schema, "f_u", enc.usr_disc, enc.usr_cont)
    if which == "f_r":
        return enc.rte_cont.copy()
    if which == "p_id":
        return params["emb/link_id"][enc.link_row]
    if which == "l_s":
        return domain_forward(params, schema, "l_s", enc.ls_disc, enc.ls_cont)
    if which == "l_d":
        return domain_forward(params, schema, "l_d", enc.ld_disc, enc.ld_cont)
    if which == "l_p":
        return enc.lp_cont.copy()
    if which in ("f_s", "f_d"):
        return np.concatenate([composite_forward(params, schema, d, enc) for d in COMPOSITES[which]], axis=-1)
    if which == "f_e":
        n_fc = len(schema.continuous("f_c"))
        fc = domain_forward(params, schema, "f_c", enc.item_disc, enc.item_cont[:, :n_fc])
        return np.concatenate([fc, enc.item_cont[:, n_fc:]], axis=1)
    raise KeyError(f"unknown domain {which!r}")


def assemble(
    record: NavigationRecord,
    which: str,
    *,
    records: list[NavigationRecord],
    graph: RoadGraph,
    vocab: Vocab,
    schema: FeatureSchema,
    params,
    candidate: int | None = None,
    link: int | None = None,
) -> FeatureVector:
    """One feature vector for ``record``.

    ``records`` is the chronological log containing ``record`` (needed for
    user history).  ``candidate`` defaults to the chosen route and ``link``
    selects the position for link-level domains.
    """
    try:
        pos = next(i for i, r in enumerate(records) if r.record_id == record.record_id)
    except StopIteration:
        raise ValueError("record is not part of records") from None
    cand = record.chosen_index if candidate is None else candidate
    raw = FeatureExtractor(graph).extract(records, [(pos, cand)])
    enc = encode(raw, schema, vocab)
    if which == "f_e":
        return FeatureVector(which, composite_forward(params, schema, which, enc)[pos])
    out = composite_forward(params, schema, which, enc)[0]
    if which in ("p_id", "l_s", "l_d", "l_p", "f_s", "f_d"):
        if link is None:
            raise ValueError(f"{which} needs a link position")
        if not 0 <= link < len(record.candidates[cand]):
            raise IndexError("link position outside the route")
        out = out[link]
    return FeatureVector(which, out)
