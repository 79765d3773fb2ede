"""Two-stage city-scale localisation on road-network graphs."""

from .citygraph import (
    CityGraph,
    Edge,
    GeoCoordinate,
    LocalPoint,
    PrimaryNode,
    SecondaryNode,
    bearing,
    from_local,
    interpolate_on_edge,
    load_graph,
    save_graph,
    to_local,
)
from .geometry import (
    CameraIntrinsics,
    Correspondence,
    Pose,
    PoseEstimate,
    RansacConfig,
    Rotation,
    intrinsics_from_fov,
    median_rotation,
    pnp_ransac,
    project,
    relative_pose_from_matches,
    reprojection_error,
    weighted_rotation_error,
)
from .matching import CorrespondenceSet, MatchQuality, PairHandle, SyntheticMatchBackend, synthetic_match
from .pipeline import (
    EdgePoseResult,
    LocalisationResult,
    PipelineConfig,
    PriorStore,
    localise,
    precompute_priors,
)
from .retrieval import (
    CandidateScore,
    CandidateSet,
    Embedding,
    EmbeddingDatabase,
    compass_filter_edges,
    score_candidates,
    select_candidates,
)
from .synthcity import QueryScenario, SynthConfig, SyntheticCity, generate_city, generate_queries

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
