"""Evaluation records, distance metrics, CDF export, ablation harness.

Failed queries stay in the denominator with an error of +inf, so they can
never count toward a Top-K bucket; the CDF then carries a final (inf, 1.0)
row. Metrics are permutation-invariant in their input records.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .citygraph import CityGraph, GeoCoordinate, to_local
from .errors import NoEstimateError, ValidationError
from .matching import SyntheticMatchBackend
from .pipeline import PipelineConfig, PriorStore, localise, precompute_priors
from .retrieval import EmbeddingDatabase, score_candidates
from .synthcity import SyntheticCity

ABLATION_ROWS = ("cvgl", "pose1", "pose2", "priors")


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    true: GeoCoordinate
    estimated: GeoCoordinate | None
    error_m: float
    edges_processed: int
    fused_score: float
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.error_m < 0:
            raise ValidationError("error_m must be >= 0")


@dataclass(frozen=True)
class MetricsSummary:
    count: int
    failures: int
    median_m: float
    top1m_pct: float
    top5m_pct: float
    top25m_pct: float
    cdf: tuple[tuple[float, float], ...]


def position_error_m(graph: CityGraph, true: GeoCoordinate, estimated: GeoCoordinate) -> float:
    """Euclidean distance in the graph's local metric frame."""
    a = to_local(graph.frame, true)
    b = to_local(graph.frame, estimated)
    return math.hypot(a.east - b.east, a.north - b.north)


def compute_metrics(records) -> MetricsSummary:
    """Median (even count: mean of the middle two), Top-Km rates, CDF."""
    records = list(records)
    if not records:
        raise ValidationError("compute_metrics needs at least one record")
    errors = np.sort(np.array([r.error_m for r in records], dtype=float))
    n = errors.size
    if n % 2 == 1:
        median = float(errors[n // 2])
    else:
        median = float(0.5 * (errors[n // 2 - 1] + errors[n // 2]))

    def top(k: float) -> float:
        return float(100.0 * np.count_nonzero(errors <= k) / n)

    finite = errors[np.isfinite(errors)]
    distinct = np.unique(finite)
    cdf = [(float(e), float(np.count_nonzero(errors <= e) / n)) for e in distinct]
    failures = int(n - finite.size)
    if failures:
        cdf.append((math.inf, 1.0))
    return MetricsSummary(
        count=n,
        failures=failures,
        median_m=median,
        top1m_pct=top(1.0),
        top5m_pct=top(5.0),
        top25m_pct=top(25.0),
        cdf=tuple(cdf),
    )


def export_cdf(summary: MetricsSummary, path) -> None:
    """CSV with header error_m,cdf; strictly increasing first column."""
    lines = ["error_m,cdf"]
    lines.extend(f"{repr(e)},{repr(f)}" for e, f in summary.cdf)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cdf(path) -> tuple[tuple[float, float], ...]:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != "error_m,cdf":
        raise ValidationError(f"{path}: not a CDF CSV (missing header)")
    rows = []
    for line in lines[1:]:
        e, f = line.split(",")
        rows.append((float(e), float(f)))
    return tuple(rows)


# ---------------------------------------------------------------------------
# records persistence


def _geo_or_none(value):
    if value is None:
        return None
    return {"lat": value.lat, "lon": value.lon}


def write_records(records, path) -> None:
    doc = [
        {
            "query_id": r.query_id,
            "true": _geo_or_none(r.true),
            "estimated": _geo_or_none(r.estimated),
            "error_m": r.error_m if math.isfinite(r.error_m) else None,
            "edges_processed": r.edges_processed,
            "fused_score": r.fused_score,
            "flags": list(r.flags),
        }
        for r in sorted(records, key=lambda r: r.query_id)
    ]
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_records(path) -> list[EvalRecord]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    records = []
    for r in doc:
        est = r["estimated"]
        records.append(
            EvalRecord(
                query_id=str(r["query_id"]),
                true=GeoCoordinate(lat=float(r["true"]["lat"]), lon=float(r["true"]["lon"])),
                estimated=None if est is None else GeoCoordinate(lat=float(est["lat"]), lon=float(est["lon"])),
                error_m=math.inf if r["error_m"] is None else float(r["error_m"]),
                edges_processed=int(r["edges_processed"]),
                fused_score=float(r["fused_score"]),
                flags=tuple(r.get("flags", [])),
            )
        )
    return records


def write_metrics(summary: MetricsSummary, path) -> None:
    doc = {
        "count": summary.count,
        "failures": summary.failures,
        "median_m": summary.median_m if math.isfinite(summary.median_m) else None,
        "top1m_pct": summary.top1m_pct,
        "top5m_pct": summary.top5m_pct,
        "top25m_pct": summary.top25m_pct,
        "cdf": [[e if math.isfinite(e) else None, f] for e, f in summary.cdf],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# batch execution


def run_queries(
    scenarios,
    truth,
    graph: CityGraph,
    db: EmbeddingDatabase,
    store: PriorStore | None,
    backend,
    cfg: PipelineConfig,
    workers: int = 1,
    coarse_only: bool = False,
) -> tuple[list[EvalRecord], float]:
    """Localise every scenario; returns (records sorted by id, stage-2 seconds).

    Per-query failures become +inf-error records instead of aborting the
    batch. Record content is independent of the worker count because each
    query is seeded independently.
    """

    def one(scenario) -> tuple[EvalRecord, float]:
        true_loc, _ = truth[scenario.query_id]
        try:
            result = localise(scenario, graph, db, store, backend, cfg, coarse_only=coarse_only)
        except NoEstimateError:
            record = EvalRecord(
                query_id=scenario.query_id,
                true=true_loc,
                estimated=None,
                error_m=math.inf,
                edges_processed=0,
                fused_score=0.0,
                flags=("failed",),
            )
            return record, 0.0
        record = EvalRecord(
            query_id=scenario.query_id,
            true=true_loc,
            estimated=result.position,
            error_m=position_error_m(graph, true_loc, result.position),
            edges_processed=result.edges_processed,
            fused_score=result.fused_score,
            flags=result.flags,
        )
        return record, result.stage2_seconds

    if workers <= 1:
        outcomes = [one(s) for s in scenarios]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, scenarios))
    records = sorted((r for r, _ in outcomes), key=lambda r: r.query_id)
    return records, float(sum(t for _, t in outcomes))


def retrieval_only_records(scenarios, truth, graph: CityGraph, db: EmbeddingDatabase) -> list[EvalRecord]:
    """Stage-1 baseline: the position estimate is the top node's location."""
    records = []
    for scenario in scenarios:
        scores = score_candidates(scenario.embedding, db)
        top = scores[0]
        true_loc, _ = truth[scenario.query_id]
        estimated = graph.node_location(top.node)
        records.append(
            EvalRecord(
                query_id=scenario.query_id,
                true=true_loc,
                estimated=estimated,
                error_m=position_error_m(graph, true_loc, estimated),
                edges_processed=0,
                fused_score=top.confidence,
                flags=("retrieval_only",),
            )
        )
    return sorted(records, key=lambda r: r.query_id)


@dataclass
class AblationResult:
    rows: dict[str, MetricsSummary]
    records: dict[str, list[EvalRecord]]
    stage2_seconds: dict[str, float]
    audit: dict


def run_ablation(city: SyntheticCity, scenarios, cfg: PipelineConfig, workers: int = 1) -> AblationResult:
    """Successive pipeline stages on identical scenarios and seeds.

    Rows: retrieval only ("cvgl"), coarse edge position without
    refinement ("pose1"), with neighbour refinement ("pose2"), and warm
    starts from a precomputed store ("priors"). The first three rows run
    cold (offline budgets, no store).
    """
    synth = city.config
    backend = SyntheticMatchBackend(
        city,
        synth.match_quality,
        seed=synth.seed,
        image_width=synth.image_width,
        image_height=synth.image_height,
        hfov_deg=synth.hfov_deg,
    )
    backend.register_queries(scenarios)
    truth = city.ground_truth
    graph, db = city.graph, city.db

    records: dict[str, list[EvalRecord]] = {}
    seconds: dict[str, float] = {}

    records["cvgl"] = retrieval_only_records(scenarios, truth, graph, db)
    seconds["cvgl"] = 0.0
    records["pose1"], seconds["pose1"] = run_queries(
        scenarios, truth, graph, db, None, backend, cfg, workers=workers, coarse_only=True
    )
    records["pose2"], seconds["pose2"] = run_queries(
        scenarios, truth, graph, db, None, backend, cfg, workers=workers
    )
    store = precompute_priors(graph, backend, cfg)
    records["priors"], seconds["priors"] = run_queries(
        scenarios, truth, graph, db, store, backend, cfg, workers=workers
    )

    rows = {name: compute_metrics(records[name]) for name in ABLATION_ROWS}
    audit = {
        "seed": synth.seed,
        "n_queries": len(list(scenarios)),
        "hfov_deg": synth.hfov_deg,
        "prior_failed_edges": list(store.failed_edges),
    }
    return AblationResult(rows=rows, records=records, stage2_seconds=seconds, audit=audit)
