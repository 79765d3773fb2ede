"""Command-line entry point: synth, priors, localise, eval, ablate.

Exit codes: 0 success, 1 usage or config error, 2 data validation error,
3 runtime localisation failure (every query failed).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .errors import ConfigError, EdgeLocError, NoEstimateError, ValidationError
from .evalkit import (
    ABLATION_ROWS,
    compute_metrics,
    export_cdf,
    read_records,
    run_ablation,
    run_queries,
    write_metrics,
    write_records,
)
from .matching import SyntheticMatchBackend
from .pipeline import load_priors, precompute_priors, priors_to_json, save_priors
from .retrieval import load_embeddings, save_embeddings
from .synthcity import attach_queries, generate_city, generate_queries, load_scenarios, save_scenarios
from .citygraph import load_graph, save_graph

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="key = value config file")
    p.add_argument(
        "--set",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        help="override one config key (repeatable)",
    )
    p.add_argument("--seed", type=int, default=None, help="override the master seed")


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _build_scene(cfg: RunConfig):
    city = generate_city(cfg.synth)
    backend = SyntheticMatchBackend(
        city,
        cfg.synth.match_quality,
        seed=cfg.synth.seed,
        image_width=cfg.synth.image_width,
        image_height=cfg.synth.image_height,
        hfov_deg=cfg.synth.hfov_deg,
    )
    return city, backend


def _cmd_synth(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    city, _ = _build_scene(cfg)
    scenarios = generate_queries(city, cfg.n_queries, cfg.synth.hfov_deg, cfg.seed)
    save_graph(city.graph, out / "graph.json")
    save_embeddings(city.db, out / "embeddings.bin")
    save_scenarios(out / "scenarios.json", scenarios, city)
    print(
        f"synth: {len(city.graph.primaries)} primaries, {len(city.graph.secondaries)} secondaries, "
        f"{len(city.graph.edges)} edges, {city.landmarks.shape[0]} landmarks, "
        f"{len(scenarios)} queries -> {out}"
    )
    return EXIT_OK


def _cmd_priors(args) -> int:
    cfg = _run_config(args)
    city, backend = _build_scene(cfg)
    graph = load_graph(args.graph) if args.graph else city.graph
    store = precompute_priors(graph, backend, cfg.pipeline)
    save_priors(store, args.out)
    if args.json_export:
        Path(args.json_export).write_text(priors_to_json(store), encoding="utf-8")
    print(
        f"priors: {len(store.reference_poses)} reference poses, "
        f"{len(store.edge_medians)} edge medians, {len(store.failed_edges)} failed edges -> {args.out}"
    )
    return EXIT_OK


def _cmd_localise(args) -> int:
    cfg = _run_config(args)
    city, backend = _build_scene(cfg)
    graph = load_graph(args.graph) if args.graph else city.graph
    db = load_embeddings(args.embeddings) if args.embeddings else city.db
    if args.scenarios:
        scenarios, truth = load_scenarios(args.scenarios)
        attach_queries(city, scenarios, truth)
    else:
        scenarios = generate_queries(city, cfg.n_queries, cfg.synth.hfov_deg, cfg.seed)
        truth = city.ground_truth
    backend.register_queries(scenarios)
    store = None
    if args.priors and not args.cold:
        store = load_priors(args.priors)
    records, stage2_s = run_queries(
        scenarios, truth, graph, db, store, backend, cfg.pipeline, workers=max(cfg.workers, args.workers or 1)
    )
    write_records(records, args.out)
    failed = sum(1 for r in records if not math.isfinite(r.error_m))
    mode = "cold" if store is None else "warm"
    print(f"localise ({mode}): {len(records)} queries, {failed} failed, stage2 {stage2_s:.2f}s -> {args.out}")
    if failed == len(records):
        raise NoEstimateError("all queries failed")
    return EXIT_OK


def _cmd_eval(args) -> int:
    records = read_records(args.records)
    summary = compute_metrics(records)
    write_metrics(summary, args.metrics_out)
    export_cdf(summary, args.cdf_out)
    median = f"{summary.median_m:.3f}" if math.isfinite(summary.median_m) else "inf"
    print(
        f"eval: n={summary.count} failures={summary.failures} median={median}m "
        f"top1m={summary.top1m_pct:.2f}% top5m={summary.top5m_pct:.2f}% top25m={summary.top25m_pct:.2f}%"
    )
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    per_seed: dict[int, dict] = {}
    pooled_records = {name: [] for name in ABLATION_ROWS}
    for seed in seeds:
        run_cfg = load_config(args.config, {**{k: v for k, v in cfg.raw.items()}, "seed": seed})
        city, _ = _build_scene(run_cfg)
        scenarios = generate_queries(city, run_cfg.n_queries, run_cfg.synth.hfov_deg, seed)
        result = run_ablation(city, scenarios, run_cfg.pipeline, workers=run_cfg.workers)
        per_seed[seed] = {
            "rows": {name: _metrics_dict(result.rows[name]) for name in ABLATION_ROWS},
            "stage2_seconds": result.stage2_seconds,
            "audit": result.audit,
        }
        for name in ABLATION_ROWS:
            pooled_records[name].extend(result.records[name])

    pooled = {name: compute_metrics(pooled_records[name]) for name in ABLATION_ROWS}
    doc = {
        "seeds": seeds,
        "per_seed": {str(s): per_seed[s] for s in seeds},
        "pooled": {name: _metrics_dict(pooled[name]) for name in ABLATION_ROWS},
    }
    (out / "ablation.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    print(f"{'config':<8} {'Med (m)':>10} {'Top-1m':>8} {'Top-5m':>8} {'Top-25m':>8}")
    for name in ABLATION_ROWS:
        s = pooled[name]
        med = f"{s.median_m:.2f}" if math.isfinite(s.median_m) else "inf"
        print(f"{name:<8} {med:>10} {s.top1m_pct:>8.2f} {s.top5m_pct:>8.2f} {s.top25m_pct:>8.2f}")
    print(f"pooled over seeds {seeds} -> {out / 'ablation.json'}")
    return EXIT_OK


def _metrics_dict(summary) -> dict:
    return {
        "count": summary.count,
        "failures": summary.failures,
        "median_m": summary.median_m if math.isfinite(summary.median_m) else None,
        "top1m_pct": summary.top1m_pct,
        "top5m_pct": summary.top5m_pct,
        "top25m_pct": summary.top25m_pct,
    }


def build_parser() -> _Parser:
    parser = _Parser(prog="edgeloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic city and query scenarios")
    _add_config_args(p)
    p.add_argument("--out-dir", type=Path, default=Path("out"))
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("priors", help="precompute the reference pose store")
    _add_config_args(p)
    p.add_argument("--graph", type=Path, default=None, help="graph JSON (default: regenerate from config)")
    p.add_argument("--out", type=Path, required=True, help="output priors binary")
    p.add_argument("--json-export", type=Path, default=None, help="also write a JSON view")
    p.set_defaults(func=_cmd_priors)

    p = sub.add_parser("localise", help="run the two-stage pipeline over scenarios")
    _add_config_args(p)
    p.add_argument("--graph", type=Path, default=None)
    p.add_argument("--embeddings", type=Path, default=None)
    p.add_argument("--scenarios", type=Path, default=None)
    p.add_argument("--priors", type=Path, default=None)
    p.add_argument("--cold", action="store_true", help="ignore priors (offline budgets, no warm start)")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="output records JSON")
    p.set_defaults(func=_cmd_localise)

    p = sub.add_parser("eval", help="metrics and CDF from a records file")
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--metrics-out", type=Path, required=True)
    p.add_argument("--cdf-out", type=Path, required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the stage-ablation grid")
    _add_config_args(p)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--out-dir", type=Path, default=Path("out"))
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NoEstimateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except EdgeLocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
