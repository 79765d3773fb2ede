"""Ground-truth city simulator: road graphs, cameras, landmarks, embeddings.

Everything the pipeline consumes can be generated here with known truth,
which makes the simulator the oracle for the whole test suite. Generation
is fully deterministic per seed: every random draw comes from a stream
keyed by the seed plus the entity id, so iteration order never matters.

The default topology is a jittered Manhattan-style grid whose edges have
near-constant yaw; a Delaunay mode provides irregular planar graphs for
stress tests. Cameras sit 2.5 m above the road (vehicle roof height,
which cancels in relative poses) and face the a -> b capture direction
of their edge.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .citygraph import (
    CityGraph,
    GeoCoordinate,
    LocalPoint,
    PrimaryNode,
    SecondaryNode,
    build_graph,
    edge_bearing_at_fraction,
    from_local,
    interpolate_on_edge,
    to_local,
)
from .errors import ConfigError, UnknownIdError
from .geometry import CV_FROM_BODY, Pose, Rotation, intrinsics_from_fov
from .matching import MatchQuality, _visible_mask
from .retrieval import Embedding, EmbeddingDatabase
from .seeding import derive_rng

CAMERA_HEIGHT_M = 2.5
DEFAULT_FRAME_ORIGIN = GeoCoordinate(lat=40.75, lon=-74.0)
SUPPORTED_HFOVS = (70.0, 90.0, 120.0)

_MIN_LATERAL_M = 2.5
_MIN_END_GAP_M = 0.5
_JUNCTION_DISK_M = 45.0
_LANDMARK_RETRIES = 20


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for one synthetic city; defaults give a small grid city."""

    grid_rows: int = 4
    grid_cols: int = 4
    topology: str = "grid"  # "grid" | "delaunay"
    edge_length_mean_m: float = 116.0
    edge_length_sigma_m: float = 6.0
    secondary_spacing_m: float = 9.83
    landmark_density: float = 0.9  # landmarks per metre of road
    landmark_lateral_sigma_m: float = 7.0
    embedding_dim: int = 768
    embedding_margin: float = 0.35  # target cosine of a query to its true node
    embedding_noise_sigma: float = 0.0
    compass_noise_sigma: float = 0.0
    match_quality: MatchQuality = MatchQuality()
    image_width: int = 512
    image_height: int = 384
    hfov_deg: float = 90.0
    seed: int = 0

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ConfigError("grid must have at least 1 row and 1 column")
        if self.grid_rows * self.grid_cols < 2:
            raise ConfigError("city needs at least 2 junctions")
        if self.topology not in ("grid", "delaunay"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.edge_length_mean_m <= 0 or self.secondary_spacing_m <= 0:
            raise ConfigError("lengths and spacings must be positive")
        if self.embedding_margin < 0:
            raise ConfigError("embedding_margin must be >= 0")
        if self.embedding_dim < 2:
            raise ConfigError("embedding_dim must be >= 2")


@dataclass(frozen=True)
class SyntheticCity:
    """Generated world: graph, landmark field, camera truth, embeddings.

    `camera_truth` maps node ids (and, once queries are generated, query
    ids) to world->body poses; `ground_truth` maps query ids to their
    (location, yaw).
    """

    graph: CityGraph
    landmarks: np.ndarray
    camera_truth: dict[str, Pose]
    db: EmbeddingDatabase
    config: SynthConfig
    ground_truth: dict[str, tuple[GeoCoordinate, float]] = field(default_factory=dict)

    def truth_for(self, query_id: str) -> tuple[GeoCoordinate, float]:
        if query_id not in self.ground_truth:
            raise UnknownIdError(f"unknown query id {query_id!r}")
        return self.ground_truth[query_id]


@dataclass(frozen=True)
class QueryScenario:
    query_id: str
    edge: str
    fraction: float
    hfov: float
    embedding: Embedding
    compass_reading: float

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction {self.fraction} outside [0, 1]")
        if self.hfov not in SUPPORTED_HFOVS:
            raise ValueError(f"hfov {self.hfov} not in {SUPPORTED_HFOVS}")


# ---------------------------------------------------------------------------
# world construction


def _grid_junctions(cfg: SynthConfig, rng) -> tuple[list[np.ndarray], list[tuple[int, int]]]:
    length = cfg.edge_length_mean_m
    positions = []
    index = {}
    for r in range(cfg.grid_rows):
        for c in range(cfg.grid_cols):
            jitter = rng.normal(0.0, cfg.edge_length_sigma_m, size=2)
            index[(r, c)] = len(positions)
            positions.append(np.array([c * length + jitter[0], r * length + jitter[1]]))
    links = []
    for r in range(cfg.grid_rows):
        for c in range(cfg.grid_cols):
            if c + 1 < cfg.grid_cols:
                links.append((index[(r, c)], index[(r, c + 1)]))
            if r + 1 < cfg.grid_rows:
                links.append((index[(r, c)], index[(r + 1, c)]))
    return positions, links


def _delaunay_junctions(cfg: SynthConfig, rng) -> tuple[list[np.ndarray], list[tuple[int, int]]]:
    from scipy.spatial import Delaunay

    n = cfg.grid_rows * cfg.grid_cols
    extent_e = max(cfg.grid_cols - 1, 1) * cfg.edge_length_mean_m
    extent_n = max(cfg.grid_rows - 1, 1) * cfg.edge_length_mean_m
    min_sep = cfg.edge_length_mean_m / 3.0
    positions: list[np.ndarray] = []
    attempts = 0
    while len(positions) < n and attempts < 200 * n:
        attempts += 1
        p = np.array([rng.uniform(0, extent_e), rng.uniform(0, extent_n)])
        if all(np.linalg.norm(p - q) >= min_sep for q in positions):
            positions.append(p)
    if len(positions) < 3:
        raise ConfigError("could not place enough junctions for a Delaunay city")
    tri = Delaunay(np.array(positions))
    links = set()
    for simplex in tri.simplices:
        for i in range(3):
            a, b = int(simplex[i]), int(simplex[(i + 1) % 3])
            links.add((min(a, b), max(a, b)))
    return positions, sorted(links)


def _build_world(cfg: SynthConfig):
    rng = derive_rng(cfg.seed, "city", "junctions")
    if cfg.topology == "grid":
        positions, links = _grid_junctions(cfg, rng)
    else:
        positions, links = _delaunay_junctions(cfg, rng)
    origin = DEFAULT_FRAME_ORIGIN

    n_digits = max(4, len(str(len(positions))))
    pids = [f"p{idx:0{n_digits}d}" for idx in range(len(positions))]
    locations = [from_local(origin, LocalPoint(east=float(p[0]), north=float(p[1]))) for p in positions]

    secondaries = []
    edge_records = []
    sec_yaws = {}
    for a_ix, b_ix in links:
        eid = f"e_{pids[a_ix]}_{pids[b_ix]}"
        a_pos, b_pos = positions[a_ix], positions[b_ix]
        direction = b_pos - a_pos
        length = float(np.linalg.norm(direction))
        direction = direction / length
        yaw = float(np.degrees(np.arctan2(direction[0], direction[1])))
        count = int(np.floor((length - _MIN_END_GAP_M) / cfg.secondary_spacing_m))
        sec_ids = []
        for i in range(1, count + 1):
            sid = f"s_{eid}_{i:03d}"
            p = a_pos + direction * (i * cfg.secondary_spacing_m)
            secondaries.append(
                SecondaryNode(
                    id=sid,
                    edge=eid,
                    location=from_local(origin, LocalPoint(east=float(p[0]), north=float(p[1]))),
                    yaw=yaw,
                    index_on_edge=i,
                )
            )
            sec_yaws[sid] = yaw
            sec_ids.append(sid)
        edge_records.append((eid, (pids[a_ix], pids[b_ix]), sec_ids))

    # primary yaw: outgoing tangent of its lexicographically first edge
    pid_index = {pid: i for i, pid in enumerate(pids)}
    outgoing: dict[str, list[tuple[str, float]]] = {pid: [] for pid in pids}
    neighbour_bearings: dict[str, list[tuple[str, float]]] = {pid: [] for pid in pids}
    for eid, (a, b), _ in edge_records:
        a_pos = positions[pid_index[a]]
        b_pos = positions[pid_index[b]]
        d = b_pos - a_pos
        fwd = float(np.degrees(np.arctan2(d[0], d[1])))
        back = float(np.degrees(np.arctan2(-d[0], -d[1])))
        outgoing[a].append((eid, fwd))
        outgoing[b].append((eid, back))
        neighbour_bearings[a].append((b, fwd))
        neighbour_bearings[b].append((a, back))

    primaries = []
    for idx, pid in enumerate(pids):
        yaw = min(outgoing[pid])[1] if outgoing[pid] else 0.0
        primaries.append(
            PrimaryNode(
                id=pid,
                location=locations[idx],
                yaw=yaw,
                bearings=tuple(sorted(neighbour_bearings[pid])),
                embedding_ref=pid,
            )
        )

    graph = build_graph(origin, primaries, secondaries, edge_records)
    return graph


def _camera_truth(graph: CityGraph) -> dict[str, Pose]:
    truth = {}
    for node_id in list(graph.primaries) + list(graph.secondaries):
        local = graph.local(node_id)
        centre = np.array([local.east, local.north, CAMERA_HEIGHT_M])
        truth[node_id] = Pose.from_centre(Rotation.yaw(graph.node_yaw(node_id)), centre)
    return truth


def _scatter_landmarks(graph: CityGraph, cfg: SynthConfig) -> np.ndarray:
    """Landmarks flank every road; each junction also gets a surrounding
    disk so cameras looking across (or out of) a junction still see
    structure."""
    points = []
    for eid in sorted(graph.edges):
        edge = graph.edges[eid]
        rng = derive_rng(cfg.seed, "city", "landmarks", eid)
        pts = graph.edge_polyline_local(eid)
        a, b = pts[0], pts[-1]
        direction = (b - a) / np.linalg.norm(b - a)
        perp = np.array([direction[1], -direction[0]])
        count = max(1, int(round(cfg.landmark_density * edge.length_m)))
        along = rng.uniform(0.0, edge.length_m, size=count)
        lateral = rng.normal(0.0, cfg.landmark_lateral_sigma_m, size=count)
        lateral = np.where(np.abs(lateral) < _MIN_LATERAL_M, np.sign(lateral + 1e-12) * _MIN_LATERAL_M, lateral)
        height = rng.uniform(0.5, 12.0, size=count)
        xy = a + direction * along[:, None] + perp * lateral[:, None]
        points.append(np.column_stack([xy, height]))
    for pid in sorted(graph.primaries):
        rng = derive_rng(cfg.seed, "city", "landmarks", "junction", pid)
        local = graph.local(pid)
        count = max(1, int(round(cfg.landmark_density * 2.0 * _JUNCTION_DISK_M)))
        radius = rng.uniform(_MIN_LATERAL_M, _JUNCTION_DISK_M, size=count)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
        height = rng.uniform(0.5, 12.0, size=count)
        xy = np.column_stack(
            [local.east + radius * np.sin(theta), local.north + radius * np.cos(theta)]
        )
        points.append(np.column_stack([xy, height]))
    return np.concatenate(points) if points else np.zeros((0, 3))


def _ensure_visibility(landmarks: np.ndarray, graph: CityGraph, truth: dict[str, Pose], cfg: SynthConfig) -> np.ndarray:
    """Resample landmarks until each is inside at least one camera frustum."""
    K = intrinsics_from_fov(cfg.hfov_deg, cfg.image_width, cfg.image_height)
    max_range = cfg.match_quality.max_range_m
    cv_rot = Rotation.from_matrix(CV_FROM_BODY)
    transforms = [Pose(cv_rot, np.zeros(3)).compose(truth[n]) for n in sorted(truth)]

    def visible_any(pts: np.ndarray) -> np.ndarray:
        seen = np.zeros(pts.shape[0], dtype=bool)
        for t in transforms:
            pending = ~seen
            if not np.any(pending):
                break
            seen[pending] = _visible_mask(t.transform(pts[pending]), K, max_range)
        return seen

    result = landmarks.copy()
    rng = derive_rng(cfg.seed, "city", "landmark-fix")
    for _ in range(_LANDMARK_RETRIES):
        seen = visible_any(result)
        missing = np.nonzero(~seen)[0]
        if missing.size == 0:
            return result
        jitter = rng.normal(0.0, cfg.landmark_lateral_sigma_m, size=(missing.size, 2))
        result[missing, :2] = result[missing, :2] + jitter
        result[missing, 2] = rng.uniform(0.5, 8.0, size=missing.size)
    # place stragglers directly in a camera's view, keeping determinism
    seen = visible_any(result)
    for ix in np.nonzero(~seen)[0]:
        pose = transforms[int(ix) % len(transforms)]
        centre = pose.camera_centre
        forward = pose.rotation.inverse().apply(np.array([0.0, 0.0, 1.0]))
        right = pose.rotation.inverse().apply(np.array([1.0, 0.0, 0.0]))
        result[ix] = centre + forward * 12.0 + right * 2.0
    return result


def _base_embedding(node_id: str, cfg: SynthConfig) -> Embedding:
    rng = derive_rng(cfg.seed, "embed", "base", node_id)
    v = rng.normal(size=cfg.embedding_dim)
    return Embedding(v / np.linalg.norm(v))


def generate_embeddings(city_or_graph, cfg: SynthConfig) -> EmbeddingDatabase:
    """Reference database: one random unit base vector per primary node."""
    graph = getattr(city_or_graph, "graph", city_or_graph)
    return EmbeddingDatabase({pid: _base_embedding(pid, cfg) for pid in graph.primaries})


def embed_query(db: EmbeddingDatabase, true_node: str, margin: float, noise_sigma: float, rng) -> Embedding:
    """Query vector at cosine ~`margin` to the true node's base.

    The query is the true base tilted away along a random perpendicular
    direction so its cosine to the true base equals `margin` exactly,
    then perturbed by per-component gaussian noise and renormalised.
    """
    base = db.get(true_node).values
    base = base / np.linalg.norm(base)
    alpha = min(float(margin), 1.0)
    r = rng.normal(size=base.size)
    r -= (r @ base) * base
    norm = np.linalg.norm(r)
    if norm < 1e-12:
        r = np.roll(base, 1)
        r -= (r @ base) * base
        norm = np.linalg.norm(r)
    q = alpha * base + np.sqrt(max(0.0, 1.0 - alpha * alpha)) * (r / norm)
    if noise_sigma > 0:
        q = q + rng.normal(0.0, noise_sigma, size=q.size)
    return Embedding(q / np.linalg.norm(q))


def generate_city(cfg: SynthConfig) -> SyntheticCity:
    """Build the full deterministic world for one seed."""
    graph = _build_world(cfg)
    truth = _camera_truth(graph)
    landmarks = _scatter_landmarks(graph, cfg)
    landmarks = _ensure_visibility(landmarks, graph, truth, cfg)
    landmarks.flags.writeable = False
    db = generate_embeddings(graph, cfg)
    return SyntheticCity(graph=graph, landmarks=landmarks, camera_truth=truth, db=db, config=cfg)


# ---------------------------------------------------------------------------
# queries


def make_query(
    city: SyntheticCity,
    query_id: str,
    edge: str,
    fraction: float,
    hfov: float,
    *,
    compass_noise_sigma: float | None = None,
    embedding_margin: float | None = None,
    embedding_noise_sigma: float | None = None,
    seed: int | None = None,
) -> QueryScenario:
    """Place one query on an edge and register its ground truth.

    The query faces the edge's a -> b capture direction at its position,
    its true retrieval node is endpoint a (the junction most recently
    passed), and its compass reading is the true yaw plus seeded noise.
    """
    cfg = city.config
    seed = cfg.seed if seed is None else seed
    location = interpolate_on_edge(city.graph, edge, fraction)
    yaw = edge_bearing_at_fraction(city.graph, edge, fraction)
    true_node = city.graph.edges[edge].endpoints[0]

    noise = cfg.compass_noise_sigma if compass_noise_sigma is None else compass_noise_sigma
    compass = yaw
    if noise > 0:
        compass = yaw + float(derive_rng(seed, "query", query_id, "compass").normal(0.0, noise))

    margin = cfg.embedding_margin if embedding_margin is None else embedding_margin
    emb_noise = cfg.embedding_noise_sigma if embedding_noise_sigma is None else embedding_noise_sigma
    embedding = embed_query(city.db, true_node, margin, emb_noise, derive_rng(seed, "query", query_id, "embed"))

    local = to_local(city.graph.frame, location)
    city.ground_truth[query_id] = (location, yaw)
    city.camera_truth[query_id] = Pose.from_centre(
        Rotation.yaw(yaw), np.array([local.east, local.north, CAMERA_HEIGHT_M])
    )
    return QueryScenario(
        query_id=query_id,
        edge=edge,
        fraction=fraction,
        hfov=float(hfov),
        embedding=embedding,
        compass_reading=compass,
    )


def generate_queries(city: SyntheticCity, n: int, hfov: float, seed: int) -> list[QueryScenario]:
    """Uniform random (edge, fraction) query placements, deterministic per seed."""
    if n < 1:
        raise ConfigError("need n >= 1 queries")
    rng = derive_rng(seed, "queries", "placement")
    edge_ids = sorted(city.graph.edges)
    picks = rng.integers(0, len(edge_ids), size=n)
    fractions = rng.uniform(0.0, 1.0, size=n)
    return [
        make_query(city, f"q{i:04d}", edge_ids[int(picks[i])], float(fractions[i]), hfov, seed=seed)
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# scenario persistence


def save_scenarios(path, scenarios, city: SyntheticCity) -> None:
    doc = {
        "embedding_dim": city.db.dim,
        "queries": [
            {
                "id": s.query_id,
                "edge": s.edge,
                "fraction": s.fraction,
                "hfov": s.hfov,
                "compass_reading": s.compass_reading,
                "embedding": [float(v) for v in s.embedding.values],
                "true": {
                    "lat": city.ground_truth[s.query_id][0].lat,
                    "lon": city.ground_truth[s.query_id][0].lon,
                    "yaw": city.ground_truth[s.query_id][1],
                },
            }
            for s in sorted(scenarios, key=lambda s: s.query_id)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_scenarios(path):
    """Read a scenario file; returns (scenarios, truth) where truth maps
    query id -> (GeoCoordinate, yaw)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    scenarios = []
    truth = {}
    for q in doc["queries"]:
        scenarios.append(
            QueryScenario(
                query_id=str(q["id"]),
                edge=str(q["edge"]),
                fraction=float(q["fraction"]),
                hfov=float(q["hfov"]),
                embedding=Embedding(np.asarray(q["embedding"], dtype=float)),
                compass_reading=float(q["compass_reading"]),
            )
        )
        truth[str(q["id"])] = (
            GeoCoordinate(lat=float(q["true"]["lat"]), lon=float(q["true"]["lon"])),
            float(q["true"]["yaw"]),
        )
    return scenarios, truth


def attach_queries(city: SyntheticCity, scenarios, truth) -> None:
    """Register externally loaded queries (posed from their stored truth)."""
    for s in scenarios:
        location, yaw = truth[s.query_id]
        local = to_local(city.graph.frame, location)
        city.ground_truth[s.query_id] = (location, yaw)
        city.camera_truth[s.query_id] = Pose.from_centre(
            Rotation.yaw(yaw), np.array([local.east, local.north, CAMERA_HEIGHT_M])
        )
