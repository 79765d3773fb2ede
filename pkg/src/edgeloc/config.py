"""Flat key = value config file shared by every CLI subcommand.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Unknown keys are rejected. Every random stream in a run derives from the
single ``seed`` key, so a config file fully reproduces a run. Defaults
(also listed in the README):

    seed = 0
    grid_rows = 4                  grid_cols = 4
    topology = grid                # grid | delaunay
    edge_length_mean_m = 116.0     edge_length_sigma_m = 6.0
    secondary_spacing_m = 9.83
    landmark_density = 0.9         landmark_lateral_sigma_m = 7.0
    embedding_dim = 768            embedding_margin = 0.35
    embedding_noise_sigma = 0.0    compass_noise_sigma = 0.0
    image_width = 512              image_height = 384
    hfov_deg = 90.0
    match.pixel_noise_sigma = 0.0  match.outlier_rate = 0.0
    match.min_shared_landmarks = 12
    match.max_pairs = none         match.max_range_m = 60.0
    theta_c = 0.9                  k = 5
    theta_re = 3.0                 theta_n = 5
    yaw_threshold = 22.5           axis_weights = 1,0.25,1
    fusion = product               # product | sum
    ransac_offline.epsilon = 2.0   ransac_offline.max_iterations = 400
    ransac_offline.refine_iterations = 400
    ransac_online.epsilon = 2.0    ransac_online.max_iterations = 100
    ransac_online.refine_iterations = 100
    n_queries = 200                workers = 1
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, ValidationError
from .geometry import RansacConfig
from .matching import MatchQuality
from .pipeline import PipelineConfig
from .synthcity import SynthConfig


def _parse_bool_none_int(text: str):
    return None if text.lower() in ("none", "null", "") else int(text)


def _parse_weights(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError("axis_weights needs exactly three values")
    return tuple(parts)  # type: ignore[return-value]


_SCHEMA = {
    "seed": int,
    "grid_rows": int,
    "grid_cols": int,
    "topology": str,
    "edge_length_mean_m": float,
    "edge_length_sigma_m": float,
    "secondary_spacing_m": float,
    "landmark_density": float,
    "landmark_lateral_sigma_m": float,
    "embedding_dim": int,
    "embedding_margin": float,
    "embedding_noise_sigma": float,
    "compass_noise_sigma": float,
    "image_width": int,
    "image_height": int,
    "hfov_deg": float,
    "match.pixel_noise_sigma": float,
    "match.outlier_rate": float,
    "match.min_shared_landmarks": int,
    "match.max_pairs": _parse_bool_none_int,
    "match.max_range_m": float,
    "theta_c": float,
    "k": int,
    "theta_re": float,
    "theta_n": int,
    "yaw_threshold": float,
    "axis_weights": _parse_weights,
    "fusion": str,
    "ransac_offline.epsilon": float,
    "ransac_offline.max_iterations": int,
    "ransac_offline.refine_iterations": int,
    "ransac_online.epsilon": float,
    "ransac_online.max_iterations": int,
    "ransac_online.refine_iterations": int,
    "n_queries": int,
    "workers": int,
}

_DEFAULTS = {
    "seed": 0,
    "grid_rows": 4,
    "grid_cols": 4,
    "topology": "grid",
    "edge_length_mean_m": 116.0,
    "edge_length_sigma_m": 6.0,
    "secondary_spacing_m": 9.83,
    "landmark_density": 0.9,
    "landmark_lateral_sigma_m": 7.0,
    "embedding_dim": 768,
    "embedding_margin": 0.35,
    "embedding_noise_sigma": 0.0,
    "compass_noise_sigma": 0.0,
    "image_width": 512,
    "image_height": 384,
    "hfov_deg": 90.0,
    "match.pixel_noise_sigma": 0.0,
    "match.outlier_rate": 0.0,
    "match.min_shared_landmarks": 12,
    "match.max_pairs": None,
    "match.max_range_m": 60.0,
    "theta_c": 0.9,
    "k": 5,
    "theta_re": 3.0,
    "theta_n": 5,
    "yaw_threshold": 22.5,
    "axis_weights": (1.0, 0.25, 1.0),
    "fusion": "product",
    "ransac_offline.epsilon": 2.0,
    "ransac_offline.max_iterations": 400,
    "ransac_offline.refine_iterations": 400,
    "ransac_online.epsilon": 2.0,
    "ransac_online.max_iterations": 100,
    "ransac_online.refine_iterations": 100,
    "n_queries": 200,
    "workers": 1,
}


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig
    pipeline: PipelineConfig
    n_queries: int
    workers: int
    raw: dict

    @property
    def seed(self) -> int:
        return self.synth.seed


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _SCHEMA[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, an optional file, and override strings into a RunConfig."""
    merged = dict(_DEFAULTS)
    if path is not None:
        merged.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            merged[key] = _SCHEMA[key](value) if isinstance(value, str) else value
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc

    try:
        quality = MatchQuality(
            pixel_noise_sigma=merged["match.pixel_noise_sigma"],
            outlier_rate=merged["match.outlier_rate"],
            min_shared_landmarks=merged["match.min_shared_landmarks"],
            max_pairs=merged["match.max_pairs"],
            max_range_m=merged["match.max_range_m"],
        )
        synth = SynthConfig(
            grid_rows=merged["grid_rows"],
            grid_cols=merged["grid_cols"],
            topology=merged["topology"],
            edge_length_mean_m=merged["edge_length_mean_m"],
            edge_length_sigma_m=merged["edge_length_sigma_m"],
            secondary_spacing_m=merged["secondary_spacing_m"],
            landmark_density=merged["landmark_density"],
            landmark_lateral_sigma_m=merged["landmark_lateral_sigma_m"],
            embedding_dim=merged["embedding_dim"],
            embedding_margin=merged["embedding_margin"],
            embedding_noise_sigma=merged["embedding_noise_sigma"],
            compass_noise_sigma=merged["compass_noise_sigma"],
            match_quality=quality,
            image_width=merged["image_width"],
            image_height=merged["image_height"],
            hfov_deg=merged["hfov_deg"],
            seed=merged["seed"],
        )
        pipeline = PipelineConfig(
            theta_c=merged["theta_c"],
            k=merged["k"],
            theta_re=merged["theta_re"],
            theta_n=merged["theta_n"],
            yaw_threshold=merged["yaw_threshold"],
            axis_weights=merged["axis_weights"],
            fusion=merged["fusion"],
            ransac_offline=RansacConfig(
                epsilon=merged["ransac_offline.epsilon"],
                max_iterations=merged["ransac_offline.max_iterations"],
                refine_iterations=merged["ransac_offline.refine_iterations"],
                seed=merged["seed"],
            ),
            ransac_online=RansacConfig(
                epsilon=merged["ransac_online.epsilon"],
                max_iterations=merged["ransac_online.max_iterations"],
                refine_iterations=merged["ransac_online.refine_iterations"],
                seed=merged["seed"],
            ),
        )
    except (ValueError, ValidationError, ConfigError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        synth=synth,
        pipeline=pipeline,
        n_queries=merged["n_queries"],
        workers=merged["workers"],
        raw=merged,
    )
