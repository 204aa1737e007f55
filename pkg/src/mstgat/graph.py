"""Detector-station graph: metadata parsing, adjacency rule, export."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DIRECTIONS = ("N", "S", "E", "W")
METADATA_COLUMNS = ("station_id", "route_id", "direction", "abs_postmile", "num_lanes", "latitude", "longitude")


@dataclass(frozen=True)
class StationMeta:
    station_id: int
    route_id: str
    direction: str
    abs_postmile: float
    num_lanes: int
    latitude: float
    longitude: float

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"station {self.station_id}: direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.abs_postmile < 0:
            raise ValueError(f"station {self.station_id}: negative postmile {self.abs_postmile}")
        if self.num_lanes < 1:
            raise ValueError(f"station {self.station_id}: num_lanes must be >= 1, got {self.num_lanes}")


def parse_station_metadata(path) -> tuple[list[StationMeta], int]:
    """Read the station CSV. Returns ``(stations, skipped_row_count)``."""
    stations: list[StationMeta] = []
    skipped = 0
    seen: set[int] = set()
    located: set[tuple[str, str, float]] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(h.strip() for h in (reader.fieldnames or ()))
        missing = [c for c in METADATA_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"{path}: station metadata header lacks columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            vals = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            if any(vals.get(c, "") == "" for c in METADATA_COLUMNS):
                skipped += 1
                log.warning("%s:%d: missing required field, row skipped", path, lineno)
                continue
            sid = int(vals["station_id"])
            if sid in seen:
                raise ValueError(f"{path}: duplicate station_id {sid}")
            st = StationMeta(
                station_id=sid,
                route_id=vals["route_id"],
                direction=vals["direction"].upper(),
                abs_postmile=float(vals["abs_postmile"]),
                num_lanes=int(vals["num_lanes"]),
                latitude=float(vals["latitude"]),
                longitude=float(vals["longitude"]),
            )
            key = (st.route_id, st.direction, st.abs_postmile)
            if key in located:
                raise ValueError(f"{path}: station {sid} shares route/direction/postmile {key} with another station")
            seen.add(sid)
            located.add(key)
            stations.append(st)
    if skipped:
        log.info("%s: %d rows skipped", path, skipped)
    return stations, skipped


def write_station_metadata(stations, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METADATA_COLUMNS)
        for s in stations:
            w.writerow([s.station_id, s.route_id, s.direction, repr(s.abs_postmile), s.num_lanes,
                        repr(s.latitude), repr(s.longitude)])


def read_manual_edges(path) -> list[tuple[int, int]]:
    edges = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            a, b = line.split(",")
            edges.append((int(a), int(b)))
    return edges


@dataclass(frozen=True)
class StationGraph:
    """Directed station graph. ``nodes`` fixes the tensor node index order."""

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]

    def index(self, station_id: int) -> int:
        try:
            return self.nodes.index(station_id)
        except ValueError:
            raise KeyError(f"unknown station {station_id}") from None

    def __len__(self) -> int:
        return len(self.nodes)

    def neighborhood(self, station_id: int) -> set[int]:
        return attention_neighborhood(self, station_id)

    def attention_mask(self) -> np.ndarray:
        """``mask[i, j]`` is true iff node j is in node i's attention neighborhood."""
        n = len(self.nodes)
        pos = {s: k for k, s in enumerate(self.nodes)}
        mask = np.eye(n, dtype=bool)
        for a, b in self.edges:
            mask[pos[a], pos[b]] = True
            mask[pos[b], pos[a]] = True
        return mask


def _travel_sign(direction: str) -> int:
    return 1 if direction in ("N", "E") else -1


def build_station_graph(stations, manual_edges=None, max_gap_miles: float | None = None) -> StationGraph:
    """Connect consecutive stations along each (route, direction) in travel order."""
    stations = list(stations)
    if not stations:
        raise ValueError("cannot build a graph from zero stations")
    ids = sorted(s.station_id for s in stations)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate station ids")
    groups: dict[tuple[str, str], list[StationMeta]] = {}
    for s in stations:
        groups.setdefault((s.route_id, s.direction), []).append(s)

    edges: list[tuple[int, int]] = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda s: (s.abs_postmile, s.station_id))
        forward = _travel_sign(key[1]) > 0
        for lo, hi in zip(members, members[1:]):
            if max_gap_miles is not None and hi.abs_postmile - lo.abs_postmile > max_gap_miles:
                continue
            edges.append((lo.station_id, hi.station_id) if forward else (hi.station_id, lo.station_id))

    known = set(ids)
    present = set(edges)
    for a, b in manual_edges or ():
        for s in (a, b):
            if s not in known:
                raise ValueError(f"manual edge ({a},{b}) references unknown station {s}")
        if a == b:
            raise ValueError(f"manual edge ({a},{b}) is a self-loop")
        if (a, b) not in present:
            edges.append((a, b))
            present.add((a, b))
    return StationGraph(nodes=tuple(ids), edges=tuple(edges))


def attention_neighborhood(graph: StationGraph, node: int) -> set[int]:
    if node not in graph.nodes:
        raise KeyError(f"unknown station {node}")
    out = {node}
    for a, b in graph.edges:
        if a == node:
            out.add(b)
        elif b == node:
            out.add(a)
    return out


def export_graph(graph: StationGraph, edge_path, nodes_path=None) -> None:
    """Edge list as ``i j`` node-index pairs plus a JSON sidecar with the node order."""
    edge_path = Path(edge_path)
    nodes_path = Path(nodes_path) if nodes_path else edge_path.with_suffix(".json")
    pos = {s: k for k, s in enumerate(graph.nodes)}
    with open(edge_path, "w") as fh:
        for a, b in graph.edges:
            fh.write(f"{pos[a]} {pos[b]}\n")
    nodes_path.write_text(json.dumps({"nodes": list(graph.nodes)}))


def load_graph(edge_path, nodes_path=None) -> StationGraph:
    edge_path = Path(edge_path)
    nodes_path = Path(nodes_path) if nodes_path else edge_path.with_suffix(".json")
    nodes = tuple(int(s) for s in json.loads(nodes_path.read_text())["nodes"])
    edges = []
    for line in edge_path.read_text().splitlines():
        if line.strip():
            i, j = line.split()
            edges.append((nodes[int(i)], nodes[int(j)]))
    return StationGraph(nodes=nodes, edges=tuple(edges))
