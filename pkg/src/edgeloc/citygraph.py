"""Road-network graph with junction (primary) and along-road (secondary) nodes.

Geodetic coordinates are WGS-style degrees; metric work happens in a local
equirectangular frame anchored at the graph's frame origin (x east,
y north, metres). At city extents (< ~10 km) the projection error is
sub-decimetre, which is far below the secondary-node spacing.

Yaw and bearings use the compass convention: degrees clockwise from
north, wrapped to (-180, 180] with -180 reported as +180.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .angles import wrap_deg
from .errors import (
    DanglingReferenceError,
    DegenerateGeometryError,
    GraphFormatError,
    OutOfRegionError,
    UnknownIdError,
)

METRES_PER_DEGREE = 111_320.0
_REGION_LIMIT_DEG = 1.0
_LENGTH_TOLERANCE = 0.01  # declared edge length may differ from the polyline by 1%


@dataclass(frozen=True)
class GeoCoordinate:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError("coordinates must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class LocalPoint:
    east: float
    north: float

    def __post_init__(self):
        if not (math.isfinite(self.east) and math.isfinite(self.north)):
            raise ValueError("local coordinates must be finite")


@dataclass(frozen=True)
class PrimaryNode:
    """Junction node: the retrieval unit of stage 1."""

    id: str
    location: GeoCoordinate
    yaw: float
    bearings: tuple[tuple[str, float], ...] = ()
    embedding_ref: str | None = None


@dataclass(frozen=True)
class SecondaryNode:
    """Along-road node: the refinement unit of stage 2."""

    id: str
    edge: str
    location: GeoCoordinate
    yaw: float
    index_on_edge: int


@dataclass(frozen=True)
class Edge:
    """Road between two primaries, carrying an ordered secondary chain.

    `bearing` is the straight-line direction a -> b; `length_m` is the
    arc length of the polyline a -> secondaries -> b.
    """

    id: str
    endpoints: tuple[str, str]
    secondaries: tuple[str, ...]
    length_m: float
    bearing: float


@dataclass(frozen=True)
class CityGraph:
    """Immutable road graph; safe to share across concurrent readers."""

    primaries: dict[str, PrimaryNode]
    secondaries: dict[str, SecondaryNode]
    edges: dict[str, Edge]
    frame: GeoCoordinate
    _incident: dict[str, tuple[str, ...]] = field(repr=False, compare=False, default_factory=dict)

    def incident_edges(self, primary_id: str) -> tuple[str, ...]:
        if primary_id not in self.primaries:
            raise UnknownIdError(f"unknown primary node {primary_id!r}")
        return self._incident.get(primary_id, ())

    def node_location(self, node_id: str) -> GeoCoordinate:
        node = self.primaries.get(node_id) or self.secondaries.get(node_id)
        if node is None:
            raise UnknownIdError(f"unknown node {node_id!r}")
        return node.location

    def node_yaw(self, node_id: str) -> float:
        node = self.primaries.get(node_id) or self.secondaries.get(node_id)
        if node is None:
            raise UnknownIdError(f"unknown node {node_id!r}")
        return node.yaw

    def edge_chain(self, edge_id: str) -> tuple[str, ...]:
        """Node ids along the edge: endpoint a, secondaries, endpoint b."""
        edge = self.edges.get(edge_id)
        if edge is None:
            raise UnknownIdError(f"unknown edge {edge_id!r}")
        return (edge.endpoints[0], *edge.secondaries, edge.endpoints[1])

    def edge_polyline_local(self, edge_id: str) -> np.ndarray:
        """(n, 2) east/north polyline of the edge in the graph frame."""
        points = [to_local(self.frame, self.node_location(n)) for n in self.edge_chain(edge_id)]
        return np.array([[p.east, p.north] for p in points])

    def local(self, node_id: str) -> LocalPoint:
        return to_local(self.frame, self.node_location(node_id))


# ---------------------------------------------------------------------------
# local metric frame


def to_local(origin: GeoCoordinate, p: GeoCoordinate) -> LocalPoint:
    """Equirectangular projection of `p` about `origin`, in metres."""
    if abs(p.lat - origin.lat) >= _REGION_LIMIT_DEG or abs(p.lon - origin.lon) >= _REGION_LIMIT_DEG:
        raise OutOfRegionError(
            f"point ({p.lat}, {p.lon}) too far from frame origin ({origin.lat}, {origin.lon})"
        )
    north = (p.lat - origin.lat) * METRES_PER_DEGREE
    east = (p.lon - origin.lon) * METRES_PER_DEGREE * math.cos(math.radians(origin.lat))
    return LocalPoint(east=east, north=north)


def from_local(origin: GeoCoordinate, p: LocalPoint) -> GeoCoordinate:
    """Inverse of `to_local`; exact up to floating point."""
    lat = origin.lat + p.north / METRES_PER_DEGREE
    lon = origin.lon + p.east / (METRES_PER_DEGREE * math.cos(math.radians(origin.lat)))
    return GeoCoordinate(lat=lat, lon=lon)


def bearing(a: GeoCoordinate, b: GeoCoordinate) -> float:
    """North-aligned bearing a -> b in (-180, 180], local-frame atan2."""
    local = to_local(a, b)
    if local.east == 0.0 and local.north == 0.0:
        raise DegenerateGeometryError("bearing of coincident points is undefined")
    return wrap_deg(math.degrees(math.atan2(local.east, local.north)))


# ---------------------------------------------------------------------------
# construction and validation


def _polyline_lengths(points: np.ndarray) -> np.ndarray:
    deltas = np.diff(points, axis=0)
    return np.hypot(deltas[:, 0], deltas[:, 1])


def build_graph(
    frame: GeoCoordinate,
    primaries,
    secondaries,
    edges,
    declared_lengths: dict[str, float] | None = None,
) -> CityGraph:
    """Assemble and fully validate a CityGraph from component records.

    `edges` entries need id, endpoints and ordered secondary ids; length
    and bearing are always derived from node locations. A declared length
    (from a file) is cross-checked within 1%.
    """
    primaries = list(primaries)
    secondaries = list(secondaries)
    prim = {p.id: p for p in primaries}
    sec = {s.id: s for s in secondaries}
    if len(prim) != len(primaries):
        raise GraphFormatError("duplicate primary node id")
    if len(sec) != len(secondaries):
        raise GraphFormatError("duplicate secondary node id")

    for node in list(prim.values()) + list(sec.values()):
        if not -180.0 <= node.yaw <= 180.0:
            raise GraphFormatError(f"node {node.id!r}: yaw {node.yaw} outside [-180, 180]")

    incident: dict[str, list[str]] = {pid: [] for pid in prim}
    built: dict[str, Edge] = {}
    declared_lengths = declared_lengths or {}

    for eid, endpoints, sec_ids in edges:
        if eid in built:
            raise GraphFormatError(f"duplicate edge id {eid!r}")
        a, b = endpoints
        for endpoint in (a, b):
            if endpoint not in prim:
                raise DanglingReferenceError(f"edge {eid!r}: endpoint {endpoint!r} does not exist")
        if a == b:
            raise GraphFormatError(f"edge {eid!r}: endpoints must differ")
        chain_sec = []
        last_index = 0
        for sid in sec_ids:
            node = sec.get(sid)
            if node is None:
                raise DanglingReferenceError(f"edge {eid!r}: secondary {sid!r} does not exist")
            if node.edge != eid:
                raise DanglingReferenceError(
                    f"secondary {sid!r} claims edge {node.edge!r} but is listed on {eid!r}"
                )
            if node.index_on_edge <= last_index:
                raise GraphFormatError(
                    f"edge {eid!r}: secondaries out of order at {sid!r} "
                    f"(index {node.index_on_edge} after {last_index})"
                )
            last_index = node.index_on_edge
            chain_sec.append(sid)

        locations = [prim[a].location] + [sec[s].location for s in chain_sec] + [prim[b].location]
        pts = np.array(
            [[to_local(prim[a].location, loc).east, to_local(prim[a].location, loc).north] for loc in locations]
        )
        seg = _polyline_lengths(pts)
        if np.any(seg <= 0.0):
            raise GraphFormatError(f"edge {eid!r}: coincident consecutive nodes on polyline")
        length = float(seg.sum())
        if eid in declared_lengths:
            declared = declared_lengths[eid]
            if abs(declared - length) > _LENGTH_TOLERANCE * length:
                raise GraphFormatError(
                    f"edge {eid!r}: declared length {declared:.3f} m deviates more than 1% "
                    f"from polyline length {length:.3f} m"
                )
        built[eid] = Edge(
            id=eid,
            endpoints=(a, b),
            secondaries=tuple(chain_sec),
            length_m=length,
            bearing=bearing(prim[a].location, prim[b].location),
        )
        incident[a].append(eid)
        incident[b].append(eid)

    listed = {sid for e in built.values() for sid in e.secondaries}
    for sid, node in sec.items():
        if node.edge not in built:
            raise DanglingReferenceError(f"secondary {sid!r}: edge {node.edge!r} does not exist")
        if sid not in listed:
            raise DanglingReferenceError(f"secondary {sid!r} is not listed on its edge {node.edge!r}")

    neighbours = {pid: set() for pid in prim}
    for e in built.values():
        neighbours[e.endpoints[0]].add(e.endpoints[1])
        neighbours[e.endpoints[1]].add(e.endpoints[0])
    for node in prim.values():
        for nid, brg in node.bearings:
            if nid not in neighbours[node.id]:
                raise DanglingReferenceError(
                    f"primary {node.id!r}: bearing references non-neighbour {nid!r}"
                )
            if not -180.0 <= brg <= 180.0:
                raise GraphFormatError(f"primary {node.id!r}: bearing {brg} outside [-180, 180]")

    return CityGraph(
        primaries=prim,
        secondaries=sec,
        edges=built,
        frame=frame,
        _incident={pid: tuple(sorted(eids)) for pid, eids in incident.items()},
    )


def _coord(obj, where: str) -> GeoCoordinate:
    try:
        return GeoCoordinate(lat=float(obj["lat"]), lon=float(obj["lon"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"{where}: bad coordinate ({exc})") from exc


def load_graph(path) -> CityGraph:
    """Load and validate a graph JSON file (schema in the repo README)."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        frame = _coord(raw["frame_origin"], "frame_origin")
        primaries = [
            PrimaryNode(
                id=str(p["id"]),
                location=_coord(p["location"], f"primary {p.get('id')!r}"),
                yaw=float(p["yaw"]),
                bearings=tuple((str(n), float(b)) for n, b in p.get("bearings", [])),
                embedding_ref=p.get("embedding_ref"),
            )
            for p in raw["primaries"]
        ]
        secondaries = [
            SecondaryNode(
                id=str(s["id"]),
                edge=str(s["edge"]),
                location=_coord(s["location"], f"secondary {s.get('id')!r}"),
                yaw=float(s["yaw"]),
                index_on_edge=int(s["index_on_edge"]),
            )
            for s in raw["secondaries"]
        ]
        edges = [
            (str(e["id"]), (str(e["endpoints"][0]), str(e["endpoints"][1])), [str(x) for x in e.get("secondaries", [])])
            for e in raw["edges"]
        ]
        declared = {str(e["id"]): float(e["length_m"]) for e in raw["edges"] if "length_m" in e}
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"graph file {path}: {exc}") from exc
    return build_graph(frame, primaries, secondaries, edges, declared)


def save_graph(graph: CityGraph, path) -> None:
    """Write the canonical JSON form (sorted ids, deterministic bytes)."""
    doc = {
        "frame_origin": {"lat": graph.frame.lat, "lon": graph.frame.lon},
        "primaries": [
            {
                "id": p.id,
                "location": {"lat": p.location.lat, "lon": p.location.lon},
                "yaw": p.yaw,
                "bearings": [[n, b] for n, b in p.bearings],
                **({"embedding_ref": p.embedding_ref} if p.embedding_ref is not None else {}),
            }
            for p in (graph.primaries[k] for k in sorted(graph.primaries))
        ],
        "secondaries": [
            {
                "id": s.id,
                "edge": s.edge,
                "location": {"lat": s.location.lat, "lon": s.location.lon},
                "yaw": s.yaw,
                "index_on_edge": s.index_on_edge,
            }
            for s in (graph.secondaries[k] for k in sorted(graph.secondaries))
        ],
        "edges": [
            {
                "id": e.id,
                "endpoints": list(e.endpoints),
                "secondaries": list(e.secondaries),
                "length_m": e.length_m,
            }
            for e in (graph.edges[k] for k in sorted(graph.edges))
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# edge geometry


def edge_arc_fractions(graph: CityGraph, edge_id: str) -> np.ndarray:
    """Arc-length fraction of every chain node, from 0.0 (a) to 1.0 (b)."""
    pts = graph.edge_polyline_local(edge_id)
    seg = _polyline_lengths(pts)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return cum / cum[-1]


def interpolate_on_edge(graph: CityGraph, edge_id: str, fraction: float) -> GeoCoordinate:
    """Point at `fraction` of the edge's arc length (0 -> a, 1 -> b)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    chain = graph.edge_chain(edge_id)
    if fraction == 0.0:
        return graph.node_location(chain[0])
    if fraction == 1.0:
        return graph.node_location(chain[-1])
    pts = graph.edge_polyline_local(edge_id)
    seg = _polyline_lengths(pts)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    target = fraction * cum[-1]
    ix = int(np.searchsorted(cum, target, side="right") - 1)
    ix = min(ix, len(seg) - 1)
    t = (target - cum[ix]) / seg[ix]
    east, north = pts[ix] * (1.0 - t) + pts[ix + 1] * t
    return from_local(graph.frame, LocalPoint(east=float(east), north=float(north)))


def project_point_fraction(graph: CityGraph, edge_id: str, east: float, north: float) -> float:
    """Arc-length fraction of the polyline point closest to (east, north)."""
    pts = graph.edge_polyline_local(edge_id)
    seg_vec = np.diff(pts, axis=0)
    seg_len = np.hypot(seg_vec[:, 0], seg_vec[:, 1])
    p = np.array([east, north])
    rel = p - pts[:-1]
    t = np.clip(np.sum(rel * seg_vec, axis=1) / seg_len**2, 0.0, 1.0)
    closest = pts[:-1] + seg_vec * t[:, None]
    d2 = np.sum((closest - p) ** 2, axis=1)
    best = int(np.argmin(d2))
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    return float((cum[best] + t[best] * seg_len[best]) / cum[-1])


def edge_bearing_at_fraction(graph: CityGraph, edge_id: str, fraction: float) -> float:
    """Bearing of the polyline segment (a -> b direction) at `fraction`."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    pts = graph.edge_polyline_local(edge_id)
    seg = _polyline_lengths(pts)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    target = fraction * cum[-1]
    ix = min(int(np.searchsorted(cum, target, side="right") - 1), len(seg) - 1)
    delta = pts[ix + 1] - pts[ix]
    return wrap_deg(math.degrees(math.atan2(delta[0], delta[1])))


def edge_tangent_bearing(graph: CityGraph, edge_id: str, away_from: str) -> float:
    """Bearing of the edge's first polyline segment leaving `away_from`.

    `away_from` must be one of the edge's endpoints; for the b endpoint
    the last segment is reversed.
    """
    edge = graph.edges.get(edge_id)
    if edge is None:
        raise UnknownIdError(f"unknown edge {edge_id!r}")
    chain = graph.edge_chain(edge_id)
    if away_from == edge.endpoints[0]:
        return bearing(graph.node_location(chain[0]), graph.node_location(chain[1]))
    if away_from == edge.endpoints[1]:
        return bearing(graph.node_location(chain[-1]), graph.node_location(chain[-2]))
    raise UnknownIdError(f"node {away_from!r} is not an endpoint of edge {edge_id!r}")
