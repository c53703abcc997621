"""Line-delimited JSON files for graphs, navigation records and users.

Every file starts with a header line naming its format version.  Floats are
written with ``repr`` precision (the ``json`` default), so a write/read cycle
reproduces every value bit-exactly.  Field names are listed in docs/SCHEMA.md.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from routerank.candidates import Route
from routerank.synthworld.network import RoadGraph
from routerank.synthworld.simulate import NavigationRecord, SimUser

DATASET_FORMAT = "routerank-dataset/1"
GRAPH_FORMAT = "routerank-graph/1"
USERS_FORMAT = "routerank-users/1"

RECORD_FIELDS = (
    "record_id",
    "user_id",
    "day",
    "timestamp_bucket",
    "age_bucket",
    "origin",
    "destination",
    "candidates",
    "chosen_index",
    "first_index",
    "trajectory",
    "similar_index",
    "label_y",
    "meta",
)


class FormatError(ValueError):
    """A file does not follow the expected line-delimited format."""


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _read_lines(path, expected_format: str) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(line) for line in lines[1:] if line]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(header, dict) or header.get("format") != expected_format:
        raise FormatError(f"{path}: expected format {expected_format!r}, got {header.get('format')!r}")
    return header, rows


def _route_to_json(route: Route) -> dict:
    return {"links": list(route.link_ids), "traffic": route.traffic_levels().tolist()}


def _route_from_json(obj: dict) -> Route:
    levels = obj["traffic"]
    route = Route(tuple(int(x) for x in obj["links"]))
    return route.with_traffic(levels) if levels else route


def record_to_json(rec: NavigationRecord) -> dict:
    return {
        "record_id": rec.record_id,
        "user_id": rec.user_id,
        "day": rec.day,
        "timestamp_bucket": rec.timestamp_bucket,
        "age_bucket": rec.age_bucket,
        "origin": rec.origin,
        "destination": rec.destination,
        "candidates": [_route_to_json(c) for c in rec.candidates],
        "chosen_index": rec.chosen_index,
        "first_index": rec.first_index,
        "trajectory": _route_to_json(rec.trajectory),
        "similar_index": rec.similar_index,
        "label_y": rec.label_y,
        "meta": rec.meta,
    }


def record_from_json(obj: dict) -> NavigationRecord:
    missing = [k for k in RECORD_FIELDS if k not in obj]
    if missing:
        raise FormatError(f"record is missing fields {missing}")
    rec = NavigationRecord(
        record_id=int(obj["record_id"]),
        user_id=int(obj["user_id"]),
        day=int(obj["day"]),
        timestamp_bucket=int(obj["timestamp_bucket"]),
        origin=int(obj["origin"]),
        destination=int(obj["destination"]),
        candidates=[_route_from_json(c) for c in obj["candidates"]],
        chosen_index=int(obj["chosen_index"]),
        first_index=int(obj["first_index"]),
        trajectory=_route_from_json(obj["trajectory"]),
        similar_index=int(obj["similar_index"]),
        label_y=int(obj["label_y"]),
        age_bucket=int(obj["age_bucket"]),
        meta=dict(obj["meta"]),
    )
    try:
        rec.validate()
    except ValueError as exc:
        raise FormatError(f"record {rec.record_id}: {exc}") from exc
    return rec


def export_dataset(records, path) -> None:
    """Write records as one header line plus one JSON object per record."""
    records = list(records)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump({"format": DATASET_FORMAT, "n_records": len(records), "fields": list(RECORD_FIELDS)}) + "\n")
        for rec in records:
            fh.write(_dump(record_to_json(rec)) + "\n")


def import_dataset(path) -> list[NavigationRecord]:
    header, rows = _read_lines(path, DATASET_FORMAT)
    if header.get("n_records") != len(rows):
        raise FormatError(f"{path}: header announces {header.get('n_records')} records, found {len(rows)}")
    return [record_from_json(r) for r in rows]


_NODE_COLS = ("x", "y", "light")
_SEG_COLS = ("u", "v", "length_km", "road_class", "lanes")
_LINK_COLS = (
    "u",
    "v",
    "w",
    "seg",
    "action",
    "lanes",
    "lanes_true",
    "hidden_quality",
    "blocked_true",
    "blocked_recorded",
)


def export_graph(graph: RoadGraph, path) -> None:
    """Write node, segment and link tables, plus the planted corruption list."""
    g = graph
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format": GRAPH_FORMAT,
            "n_nodes": g.n_nodes,
            "n_segments": g.n_segments,
            "n_links": g.n_links,
            "node_columns": list(_NODE_COLS),
            "segment_columns": list(_SEG_COLS),
            "link_columns": list(_LINK_COLS),
        }
        fh.write(_dump(header) + "\n")
        for (x, y), light in zip(g.coords.tolist(), g.node_light.tolist()):
            fh.write(_dump({"t": "node", "x": x, "y": y, "light": light}) + "\n")
        for row in zip(*(a.tolist() for a in (g.seg_u, g.seg_v, g.seg_length, g.seg_class, g.seg_lanes))):
            fh.write(_dump({"t": "segment", **dict(zip(_SEG_COLS, row))}) + "\n")
        cols = (
            g.link_u,
            g.link_v,
            g.link_w,
            g.link_seg,
            g.link_action,
            g.lanes,
            g.lanes_true,
            g.hidden_quality,
            g.blocked_true,
            g.blocked_recorded,
        )
        for row in zip(*(a.tolist() for a in cols)):
            fh.write(_dump({"t": "link", **dict(zip(_LINK_COLS, row))}) + "\n")
        for link, kind in zip(g.corrupted.tolist(), g.corruption_kind.tolist()):
            fh.write(_dump({"t": "corruption", "link": link, "kind": kind}) + "\n")


def import_graph(path) -> RoadGraph:
    header, rows = _read_lines(path, GRAPH_FORMAT)
    tables: dict[str, list[dict]] = {"node": [], "segment": [], "link": [], "corruption": []}
    for row in rows:
        kind = row.get("t")
        if kind not in tables:
            raise FormatError(f"{path}: unknown row type {kind!r}")
        tables[kind].append(row)
    for kind, key in (("node", "n_nodes"), ("segment", "n_segments"), ("link", "n_links")):
        if len(tables[kind]) != header.get(key):
            raise FormatError(f"{path}: expected {header.get(key)} {kind} rows, found {len(tables[kind])}")

    def col(kind, name, dtype):
        return np.array([r[name] for r in tables[kind]], dtype=dtype)

    coords = np.stack([col("node", "x", np.float64), col("node", "y", np.float64)], axis=1).reshape(-1, 2)
    graph = RoadGraph(
        coords=coords,
        seg_u=col("segment", "u", np.int64),
        seg_v=col("segment", "v", np.int64),
        seg_length=col("segment", "length_km", np.float64),
        seg_class=col("segment", "road_class", np.int64),
        seg_lanes=col("segment", "lanes", np.int64),
        node_light=col("node", "light", bool),
        link_u=col("link", "u", np.int64),
        link_v=col("link", "v", np.int64),
        link_w=col("link", "w", np.int64),
        link_seg=col("link", "seg", np.int64),
        link_action=col("link", "action", np.int64),
        lanes=col("link", "lanes", np.int64),
        lanes_true=col("link", "lanes_true", np.int64),
        hidden_quality=col("link", "hidden_quality", np.float64),
        blocked_true=col("link", "blocked_true", bool),
        blocked_recorded=col("link", "blocked_recorded", bool),
        corrupted=col("corruption", "link", np.int64),
        corruption_kind=col("corruption", "kind", np.int64),
    )
    try:
        graph.validate()
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return graph


def export_users(users, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump({"format": USERS_FORMAT, "n_users": len(users)}) + "\n")
        for u in users:
            row = {
                "user_id": u.user_id,
                "age_bucket": u.age_bucket,
                "preference": np.asarray(u.preference, dtype=float).tolist(),
                "deviation_count": u.deviation_count,
                "anchors": list(u.anchors),
                "activity": u.activity,
            }
            fh.write(_dump(row) + "\n")


def import_users(path) -> list[SimUser]:
    _, rows = _read_lines(path, USERS_FORMAT)
    return [
        SimUser(
            user_id=int(r["user_id"]),
            age_bucket=int(r["age_bucket"]),
            preference=np.array(r["preference"], dtype=np.float64),
            deviation_count=int(r["deviation_count"]),
            anchors=tuple(int(a) for a in r["anchors"]),
            activity=float(r["activity"]),
        )
        for r in rows
    ]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
