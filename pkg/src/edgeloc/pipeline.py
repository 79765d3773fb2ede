"""Stage 2 and the full two-stage localisation loop.

Per query: stage 1 ranks candidate junctions by embedding confidence, a
compass filter keeps outgoing edges compatible with the heading, then each
surviving edge is scanned: the query is pose-estimated against every
reference camera on the edge, the best-supported reference picks the
coarse position, and a refinement against its two neighbours produces the
final pose. An edge whose pose rotation sits within `theta_re` of the
edge's median reference rotation stops the loop early; otherwise results
are fused across stages and the best fused edge wins.

Reference world poses use the graph's geo-tags for anchoring. The
precomputed `PriorStore` contributes the per-edge median rotation used
for gating and the estimated reference poses used to warm-start RANSAC
(scored as hypothesis 0), which is what lets the online iteration budget
stay small. Running without a store is the "cold" mode: no warm starts,
offline-sized budgets, median rotations read from graph yaws.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .angles import angular_difference_deg, wrap_deg
from .citygraph import (
    CityGraph,
    GeoCoordinate,
    edge_arc_fractions,
    edge_tangent_bearing,
    interpolate_on_edge,
    project_point_fraction,
)
from .errors import (
    DegenerateSolutionError,
    InsufficientOverlapError,
    NoEstimateError,
    TooFewCorrespondencesError,
    ValidationError,
)
from .geometry import (
    CV_FROM_BODY,
    Pose,
    PoseEstimate,
    RansacConfig,
    Rotation,
    intrinsics_from_fov,
    median_rotation,
    relative_pose_from_matches,
    weighted_rotation_error,
)
from .matching import PairHandle
from .retrieval import compass_filter_edges, score_candidates, select_candidates
from .seeding import derive_seed
from .synthcity import CAMERA_HEIGHT_M, QueryScenario

_PRIORS_MAGIC = b"PRST"
_PRIORS_VERSION = 1
_RMS_QUANTUM_PX = 1e-9  # reference-selection ties compare RMS at this resolution

_EDGE_FAILURES = (DegenerateSolutionError, InsufficientOverlapError, TooFewCorrespondencesError)


@dataclass(frozen=True)
class PipelineConfig:
    """Thresholds and budgets for the two-stage loop."""

    theta_c: float = 0.9
    k: int = 5
    theta_re: float = 3.0
    theta_n: int = 5
    yaw_threshold: float = 22.5
    axis_weights: tuple[float, float, float] = (1.0, 0.25, 1.0)
    fusion: str = "product"  # "product" | "sum"
    ransac_offline: RansacConfig = RansacConfig(epsilon=2.0, max_iterations=400, refine_iterations=400, seed=0)
    ransac_online: RansacConfig = RansacConfig(epsilon=2.0, max_iterations=100, refine_iterations=100, seed=0)

    def __post_init__(self):
        if self.theta_re <= 0 or self.theta_n <= 0 or self.k <= 0:
            raise ValidationError("thresholds must be positive")
        if self.fusion not in ("product", "sum"):
            raise ValidationError(f"unknown fusion policy {self.fusion!r}")


@dataclass
class PriorStore:
    """Precomputed per-edge reference poses and median rotations.

    `reference_poses` maps secondary-node ids to their estimated
    world->body poses; `edge_medians` holds each edge's median reference
    rotation; `failed_edges` lists edges whose precomputation failed (the
    pipeline runs those cold).
    """

    reference_poses: dict[str, Pose] = field(default_factory=dict)
    edge_medians: dict[str, Rotation] = field(default_factory=dict)
    failed_edges: tuple[str, ...] = ()


@dataclass(frozen=True)
class EdgePoseResult:
    """Outcome of scanning one candidate edge.

    `refined` is the best contributing relative estimate (its inlier set
    refers to that pair's correspondences); `rotation` and `fraction`
    describe the combined query pose on the edge.
    """

    edge: str
    t_p: int
    refined: PoseEstimate
    rotation: Rotation
    rotation_error: float
    fraction: float
    support: int
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class LocalisationResult:
    query_id: str
    position: GeoCoordinate
    rotation: Rotation
    stage1_confidence: float
    stage2_confidence: float
    fused_score: float
    edges_processed: int
    per_edge: tuple[EdgePoseResult, ...]
    flags: tuple[str, ...]
    stage2_seconds: float


@dataclass
class EdgeScan:
    """Per-reference estimates along one edge (chain order: a, ..., b)."""

    edge: str
    t_p: int
    estimates: list[PoseEstimate | None]
    query_poses: list[Pose | None]  # query world->body pose anchored per reference


# ---------------------------------------------------------------------------
# frame plumbing

_CV_ROT = Rotation.from_matrix(CV_FROM_BODY)


def _body_to_cv(body: Pose) -> Pose:
    return Pose(_CV_ROT, np.zeros(3)).compose(body)


def _cv_to_body(cv: Pose) -> Pose:
    return Pose(_CV_ROT.inverse(), np.zeros(3)).compose(cv)


def _node_body_pose(graph: CityGraph, node_id: str, yaw_override: float | None = None) -> Pose:
    local = graph.local(node_id)
    yaw = graph.node_yaw(node_id) if yaw_override is None else yaw_override
    return Pose.from_centre(Rotation.yaw(yaw), np.array([local.east, local.north, CAMERA_HEIGHT_M]))


def _chain_view_yaws(graph: CityGraph, edge_id: str) -> list[float | None]:
    """Per-chain-node reference view heading (a -> b capture direction).

    Junction panoramas are cropped along the edge; secondaries keep their
    stored capture yaw (None).
    """
    edge = graph.edges[edge_id]
    yaws: list[float | None] = [None] * len(graph.edge_chain(edge_id))
    yaws[0] = edge_tangent_bearing(graph, edge_id, away_from=edge.endpoints[0])
    yaws[-1] = wrap_deg(edge_tangent_bearing(graph, edge_id, away_from=edge.endpoints[1]) + 180.0)
    return yaws


def _zeta_for_edge(graph: CityGraph, store: PriorStore | None, edge_id: str) -> Rotation:
    """Median reference rotation: from the store, else from graph yaws."""
    if store is not None and edge_id in store.edge_medians:
        return store.edge_medians[edge_id]
    chain = graph.edge_chain(edge_id)
    if len(chain) > 2:
        return median_rotation([Rotation.yaw(graph.node_yaw(n)) for n in chain[1:-1]])
    return Rotation.yaw(edge_tangent_bearing(graph, edge_id, away_from=chain[0]))


# ---------------------------------------------------------------------------
# precomputation


def precompute_priors(graph: CityGraph, backend, cfg: PipelineConfig) -> PriorStore:
    """Estimate reference poses pair-by-pair along every edge.

    Consecutive reference pairs are solved with the offline budget, then
    chained from both anchored endpoints, giving two estimates per
    secondary (one per direction). Their inlier-weighted combination is
    stored as the node's pose; the per-edge median rotation is taken over
    all directional estimates. A failing edge is flagged and skipped.
    """
    store = PriorStore()
    failed: list[str] = []
    for edge_id in sorted(graph.edges):
        chain = graph.edge_chain(edge_id)
        view_yaws = _chain_view_yaws(graph, edge_id)
        relatives: list[PoseEstimate] = []
        try:
            for i in range(len(chain) - 1):
                handle = PairHandle(
                    reference=chain[i],
                    query=chain[i + 1],
                    view_yaw=view_yaws[i] if i == 0 else None,
                    query_view_yaw=view_yaws[i + 1] if i + 1 == len(chain) - 1 else None,
                )
                matches = backend.match_pair(handle)
                seed = derive_seed(cfg.ransac_offline.seed, "priors", edge_id, i)
                relatives.append(
                    relative_pose_from_matches(
                        matches, backend.intrinsics(), cfg.ransac_offline.with_seed(seed)
                    )
                )
        except _EDGE_FAILURES:
            failed.append(edge_id)
            continue

        anchor_a = _body_to_cv(_node_body_pose(graph, chain[0], view_yaws[0]))
        anchor_b = _body_to_cv(_node_body_pose(graph, chain[-1], view_yaws[-1]))

        forward: list[Pose] = []  # cv pose of chain[i+1], chained from a
        current = anchor_a
        for est in relatives:
            current = est.pose.compose(current)
            forward.append(current)
        backward: dict[int, Pose] = {}  # cv pose of chain[i], chained from b
        current = anchor_b
        for i in range(len(relatives) - 1, -1, -1):
            current = relatives[i].pose.inverse().compose(current)
            backward[i] = current

        n_sec = len(chain) - 2
        directional: list[Rotation] = []
        for i in range(1, n_sec + 1):
            fw = _cv_to_body(forward[i - 1])
            bw = _cv_to_body(backward[i])
            w_fw = relatives[i - 1].inlier_count
            w_bw = relatives[i].inlier_count
            t = w_bw / (w_fw + w_bw)
            combined = Pose.from_centre(
                fw.rotation.slerp(bw.rotation, t),
                (1.0 - t) * fw.camera_centre + t * bw.camera_centre,
            )
            store.reference_poses[chain[i]] = combined
            directional.extend([fw.rotation, bw.rotation])
        if not directional:
            # edge without secondaries: use the two endpoint-chain estimates
            directional = [_cv_to_body(forward[-1]).rotation, _cv_to_body(backward[0]).rotation]
        store.edge_medians[edge_id] = median_rotation(directional)
    store.failed_edges = tuple(failed)
    return store


# ---------------------------------------------------------------------------
# per-edge operations


def _prior_cv_pose(graph: CityGraph, store: PriorStore | None, node_id: str, yaw_override: float | None) -> Pose:
    if store is not None and node_id in store.reference_poses:
        return _body_to_cv(store.reference_poses[node_id])
    return _body_to_cv(_node_body_pose(graph, node_id, yaw_override))


def estimate_position_along_edge(
    query: QueryScenario,
    edge_id: str,
    graph: CityGraph,
    store: PriorStore | None,
    backend,
    cfg: PipelineConfig,
) -> EdgeScan:
    """Pose the query against every reference on the edge; pick the best.

    The winning reference `t_p` maximises the inlier count (ties: lower
    RMS at nanopixel resolution, then smaller relative translation, then
    chain order). With a store present, each solve is warm-started from
    the best query pose found so far composed with the reference's prior
    pose; cold runs pass no initial hypothesis.
    """
    chain = graph.edge_chain(edge_id)
    view_yaws = _chain_view_yaws(graph, edge_id)
    ransac = cfg.ransac_online if store is not None else cfg.ransac_offline
    K = intrinsics_from_fov(query.hfov, backend.image_width, backend.image_height)
    zeta = _zeta_for_edge(graph, store, edge_id) if store is not None else None

    estimates: list[PoseEstimate | None] = [None] * len(chain)
    query_poses: list[Pose | None] = [None] * len(chain)
    guess_cv: Pose | None = None
    best: tuple | None = None  # sort key
    best_ix = -1

    for i, ref in enumerate(chain):
        init = None
        if store is not None:
            ref_prior_cv = _prior_cv_pose(graph, store, ref, view_yaws[i])
            if guess_cv is not None:
                init = guess_cv.compose(ref_prior_cv.inverse())
            elif zeta is not None:
                seeded = Pose.from_centre(_CV_ROT.compose(zeta), ref_prior_cv.camera_centre)
                init = seeded.compose(ref_prior_cv.inverse())
        try:
            matches = backend.match_pair(PairHandle(reference=ref, query=query.query_id, view_yaw=view_yaws[i]))
            seed = derive_seed(ransac.seed, "rpe", query.query_id, ref)
            est = relative_pose_from_matches(matches, K, ransac.with_seed(seed), init=init)
        except _EDGE_FAILURES:
            continue
        estimates[i] = est
        anchor_cv = _body_to_cv(_node_body_pose(graph, ref, view_yaws[i]))
        q_cv = est.pose.compose(anchor_cv)
        query_poses[i] = _cv_to_body(q_cv)
        key = (
            -est.inlier_count,
            round(est.rms_reprojection / _RMS_QUANTUM_PX),
            float(np.linalg.norm(est.pose.translation)),
            i,
        )
        if best is None or key < best:
            best, best_ix = key, i
            guess_cv = q_cv

    if best_ix < 0:
        raise DegenerateSolutionError(f"every reference on edge {edge_id!r} failed")
    return EdgeScan(edge=edge_id, t_p=best_ix, estimates=estimates, query_poses=query_poses)


def refine_pose(
    query: QueryScenario,
    edge_id: str,
    scan: EdgeScan,
    graph: CityGraph,
    store: PriorStore | None,
    backend,
    cfg: PipelineConfig,
) -> EdgePoseResult:
    """Refine against the winning reference's neighbours and score the edge.

    Neighbour estimates are combined by inlier-weighted averaging of the
    query positions and identically weighted rotation interpolation; if
    both neighbours fail, the `t_p` estimate alone is used (flagged). The
    rotation error gates against the edge's median reference rotation.
    """
    chain = graph.edge_chain(edge_id)
    view_yaws = _chain_view_yaws(graph, edge_id)
    t_p = scan.t_p
    K = intrinsics_from_fov(query.hfov, backend.image_width, backend.image_height)
    ransac = cfg.ransac_online if store is not None else cfg.ransac_offline
    flags: list[str] = []

    contributions: list[tuple[PoseEstimate, Pose]] = []
    for nb in (t_p - 1, t_p + 1):
        if not 0 <= nb < len(chain):
            continue
        if store is not None:
            # re-solve with a strong warm start from the winning reference
            try:
                matches = backend.match_pair(
                    PairHandle(reference=chain[nb], query=query.query_id, view_yaw=view_yaws[nb])
                )
                ref_prior_cv = _prior_cv_pose(graph, store, chain[nb], view_yaws[nb])
                init = _body_to_cv(scan.query_poses[t_p]).compose(ref_prior_cv.inverse())
                seed = derive_seed(ransac.seed, "rpe", query.query_id, chain[nb])
                est = relative_pose_from_matches(matches, K, ransac.with_seed(seed), init=init)
            except _EDGE_FAILURES:
                continue
            anchor_cv = _body_to_cv(_node_body_pose(graph, chain[nb], view_yaws[nb]))
            contributions.append((est, _cv_to_body(est.pose.compose(anchor_cv))))
        elif scan.estimates[nb] is not None:
            contributions.append((scan.estimates[nb], scan.query_poses[nb]))

    if not contributions:
        if scan.estimates[t_p] is None:
            raise DegenerateSolutionError(f"no usable estimate on edge {edge_id!r}")
        flags.append("single_reference")
        contributions = [(scan.estimates[t_p], scan.query_poses[t_p])]
    elif len(contributions) == 1:
        flags.append("single_neighbour")

    weights = np.array([c[0].inlier_count for c in contributions], dtype=float)
    weights /= weights.sum()
    centre = sum(w * c[1].camera_centre for w, c in zip(weights, contributions))
    if len(contributions) == 2:
        rotation = contributions[0][1].rotation.slerp(contributions[1][1].rotation, float(weights[1]))
    else:
        rotation = contributions[0][1].rotation

    fraction = project_point_fraction(graph, edge_id, float(centre[0]), float(centre[1]))
    zeta = _zeta_for_edge(graph, store, edge_id)
    rot_err = weighted_rotation_error(rotation, zeta, cfg.axis_weights)
    best_contribution = max(contributions, key=lambda c: c[0].inlier_count)[0]
    return EdgePoseResult(
        edge=edge_id,
        t_p=t_p,
        refined=best_contribution,
        rotation=rotation,
        rotation_error=rot_err,
        fraction=fraction,
        support=int(sum(c[0].inlier_count for c in contributions)),
        flags=tuple(flags),
    )


def _coarse_result(scan: EdgeScan, graph: CityGraph, store: PriorStore | None, cfg: PipelineConfig) -> EdgePoseResult:
    """Edge result without neighbour refinement: snap to the t_p reference."""
    est = scan.estimates[scan.t_p]
    pose = scan.query_poses[scan.t_p]
    fractions = edge_arc_fractions(graph, scan.edge)
    zeta = _zeta_for_edge(graph, store, scan.edge)
    return EdgePoseResult(
        edge=scan.edge,
        t_p=scan.t_p,
        refined=est,
        rotation=pose.rotation,
        rotation_error=weighted_rotation_error(pose.rotation, zeta, cfg.axis_weights),
        fraction=float(fractions[scan.t_p]),
        support=est.inlier_count,
        flags=("coarse",),
    )


# ---------------------------------------------------------------------------
# the full loop


def localise(
    query: QueryScenario,
    graph: CityGraph,
    db,
    store: PriorStore | None,
    backend,
    cfg: PipelineConfig,
    coarse_only: bool = False,
) -> LocalisationResult:
    """Run both stages for one query.

    Candidate nodes are processed in descending stage-1 confidence (at
    most `theta_n`), their compass-compatible edges in ascending heading
    difference. The loop stops at the first edge whose rotation error is
    within `theta_re`; that edge is returned (early-stop contract).
    Otherwise stage-2 confidences are formed by min-max scaling the
    rotation errors and the fused-score argmax wins. An empty stage-1
    candidate set falls back to the single top-scoring node, flagged.
    """
    scores = score_candidates(query.embedding, db)
    selected = select_candidates(scores, cfg.theta_c, cfg.k)
    flags: list[str] = []
    candidates = selected.candidates
    if not candidates:
        candidates = (scores[0],)
        flags.append("stage1_fallback")

    t_start = time.perf_counter()
    processed: list[tuple[float, EdgePoseResult]] = []  # (stage1 confidence, edge result)
    failed_edges: list[str] = []
    seen: set[str] = set()
    early_stop = False

    for cand in candidates[: cfg.theta_n]:
        edges = compass_filter_edges(graph, cand.node, query.compass_reading, cfg.yaw_threshold)
        ordered = sorted(
            edges,
            key=lambda eid: (
                angular_difference_deg(
                    edge_tangent_bearing(graph, eid, away_from=cand.node), query.compass_reading
                ),
                eid,
            ),
        )
        for edge_id in ordered:
            if edge_id in seen:
                continue
            seen.add(edge_id)
            try:
                scan = estimate_position_along_edge(query, edge_id, graph, store, backend, cfg)
                if coarse_only:
                    result = _coarse_result(scan, graph, store, cfg)
                else:
                    result = refine_pose(query, edge_id, scan, graph, store, backend, cfg)
            except _EDGE_FAILURES:
                failed_edges.append(edge_id)
                continue
            processed.append((cand.confidence, result))
            if result.rotation_error <= cfg.theta_re:
                early_stop = True
                break
        if early_stop:
            break

    stage2_seconds = time.perf_counter() - t_start
    if not processed:
        raise NoEstimateError(
            f"query {query.query_id!r}: no edge produced a pose "
            f"(candidates={[c.node for c in candidates[: cfg.theta_n]]}, failed_edges={failed_edges})"
        )

    errors = np.array([r.rotation_error for e, r in processed])
    spread = errors.max() - errors.min()
    if spread < 1e-15:
        stage2_conf = np.ones_like(errors)
    else:
        stage2_conf = 1.0 - (errors - errors.min()) / spread
    stage1_conf = np.array([c for c, _ in processed])
    if cfg.fusion == "product":
        fused = stage1_conf * stage2_conf
    else:
        fused = 0.5 * (stage1_conf + stage2_conf)

    if early_stop:
        winner_ix = len(processed) - 1
    else:
        flags.append("no_threshold_met")
        order = sorted(range(len(processed)), key=lambda i: (-fused[i], errors[i], i))
        winner_ix = order[0]

    _, winner = processed[winner_ix]
    if failed_edges:
        flags.append("edge_failures")
    position = interpolate_on_edge(graph, winner.edge, winner.fraction)
    return LocalisationResult(
        query_id=query.query_id,
        position=position,
        rotation=winner.rotation,
        stage1_confidence=float(stage1_conf[winner_ix]),
        stage2_confidence=float(stage2_conf[winner_ix]),
        fused_score=float(fused[winner_ix]),
        edges_processed=len(processed),
        per_edge=tuple(r for _, r in processed),
        flags=tuple(flags),
        stage2_seconds=stage2_seconds,
    )


# ---------------------------------------------------------------------------
# prior store persistence


def save_priors(store: PriorStore, path) -> None:
    """Versioned binary: magic, version, counts, then sorted records.

    Serialisation is canonical, so save(load(x)) reproduces x byte for
    byte.
    """
    out = bytearray()
    out += _PRIORS_MAGIC
    out += struct.pack(
        "<III", _PRIORS_VERSION, len(store.reference_poses), len(store.edge_medians)
    )
    out += struct.pack("<I", len(store.failed_edges))

    def put_id(name: str) -> None:
        encoded = name.encode("utf-8")
        out.extend(struct.pack("<I", len(encoded)))
        out.extend(encoded)

    for node_id in sorted(store.reference_poses):
        pose = store.reference_poses[node_id]
        put_id(node_id)
        out.extend(struct.pack("<7d", *pose.rotation.quaternion, *pose.translation))
    for edge_id in sorted(store.edge_medians):
        put_id(edge_id)
        out.extend(struct.pack("<4d", *store.edge_medians[edge_id].quaternion))
    for edge_id in sorted(store.failed_edges):
        put_id(edge_id)

    Path(path).write_bytes(bytes(out))


def load_priors(path) -> PriorStore:
    data = Path(path).read_bytes()
    if not data.startswith(_PRIORS_MAGIC):
        raise ValidationError("not a prior-store file (bad magic)")
    version, n_poses, n_medians, n_failed = struct.unpack_from("<IIII", data, 4)
    if version != _PRIORS_VERSION:
        raise ValidationError(f"unsupported prior-store version {version}")
    offset = 20

    def take_id() -> str:
        nonlocal offset
        (ln,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + ln].decode("utf-8")
        offset += ln
        return name

    store = PriorStore()
    for _ in range(n_poses):
        node_id = take_id()
        vals = struct.unpack_from("<7d", data, offset)
        offset += 56
        store.reference_poses[node_id] = Pose(Rotation.from_quaternion(vals[:4]), np.array(vals[4:]))
    for _ in range(n_medians):
        edge_id = take_id()
        vals = struct.unpack_from("<4d", data, offset)
        offset += 32
        store.edge_medians[edge_id] = Rotation.from_quaternion(vals)
    failed = [take_id() for _ in range(n_failed)]
    store.failed_edges = tuple(failed)
    return store


def priors_to_json(store: PriorStore) -> str:
    """Human-inspectable JSON export of a store."""
    doc = {
        "reference_poses": {
            node_id: {
                "quaternion_wxyz": [float(v) for v in pose.rotation.quaternion],
                "translation": [float(v) for v in pose.translation],
            }
            for node_id, pose in sorted(store.reference_poses.items())
        },
        "edge_medians": {
            edge_id: [float(v) for v in rot.quaternion]
            for edge_id, rot in sorted(store.edge_medians.items())
        },
        "failed_edges": sorted(store.failed_edges),
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"
