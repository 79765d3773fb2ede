"""Correspondence generation seam between image pairs and the PnP solver.

A backend turns a (reference, query) pair handle into 3D points in the
reference camera frame paired with query-image pixels, which is the exact
shape `pnp_ransac` consumes. The built-in backend generates ground-truth
correspondences from a synthetic scene, with controllable pixel noise and
outlier corruption; a learned matcher can be wired in behind the same
interface (one JSON request line in, one JSON correspondence line out,
see README).

Visibility is frustum + range: a landmark is seen when it projects inside
the image between the near plane and `max_range_m`. The range limit makes
the shared-landmark count fall off with camera baseline, which is what
lets inlier counts identify the nearest reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import InsufficientOverlapError, UnknownIdError, ValidationError
from .geometry import CV_FROM_BODY, CameraIntrinsics, Correspondence, Pose, Rotation, intrinsics_from_fov
from .seeding import derive_rng

if TYPE_CHECKING:  # pragma: no cover
    from .synthcity import SyntheticCity

_NEAR_PLANE_M = 0.5


@dataclass(frozen=True)
class PairHandle:
    """Names one reference/query image pair.

    `view_yaw` / `query_view_yaw` optionally re-aim the respective
    camera: panoramic junction nodes can be cropped toward any heading.
    None keeps the camera's capture yaw.
    """

    reference: str
    query: str
    view_yaw: float | None = None
    query_view_yaw: float | None = None


@dataclass(frozen=True)
class MatchQuality:
    """Synthetic stand-in for learned-matcher quality.

    `max_pairs`, when set, caps the emitted correspondences by seeded
    subsampling; `max_range_m` bounds landmark visibility distance.
    """

    pixel_noise_sigma: float = 0.0
    outlier_rate: float = 0.0
    min_shared_landmarks: int = 12
    max_pairs: int | None = None
    max_range_m: float = 60.0

    def __post_init__(self):
        if self.pixel_noise_sigma < 0:
            raise ValidationError("pixel_noise_sigma must be >= 0")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValidationError("outlier_rate must be in [0, 1)")
        if self.min_shared_landmarks < 0:
            raise ValidationError("min_shared_landmarks must be >= 0")
        if self.max_pairs is not None and self.max_pairs < 1:
            raise ValidationError("max_pairs must be >= 1 when set")
        if self.max_range_m <= _NEAR_PLANE_M:
            raise ValidationError(f"max_range_m must exceed the {_NEAR_PLANE_M} m near plane")


@dataclass(frozen=True)
class CorrespondenceSet:
    """PnP-ready pairs plus generator bookkeeping.

    `outlier_indices` records which pairs the synthetic generator
    corrupted (empty for real backends); it exists for test oracles and
    must not be consumed by the solver path.
    """

    pairs: tuple[Correspondence, ...]
    source: str
    outlier_indices: tuple[int, ...] = ()


def _visible_mask(cam_pts: np.ndarray, K: CameraIntrinsics, max_range_m: float = np.inf) -> np.ndarray:
    z = cam_pts[:, 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        u = K.fx * cam_pts[:, 0] / z + K.cx
        v = K.fy * cam_pts[:, 1] / z + K.cy
    return (z > _NEAR_PLANE_M) & (z <= max_range_m) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)


class SyntheticMatchBackend:
    """Match backend over a synthetic scene; read-only after construction.

    Per-camera visible-landmark sets are cached (pure geometry, so the
    cache never changes results), which matters because every reference
    camera is revisited by many queries.
    """

    name = "synthetic"

    def __init__(
        self,
        scene: SyntheticCity,
        quality: MatchQuality,
        seed: int,
        image_width: int = 512,
        image_height: int = 384,
        hfov_deg: float = 90.0,
    ):
        self.scene = scene
        self.quality = quality
        self.seed = int(seed)
        self.image_width = int(image_width)
        self.image_height = int(image_height)
        self.hfov_deg = float(hfov_deg)
        self._query_hfov: dict[str, float] = {}
        self._visible_cache: dict[tuple, tuple[np.ndarray, Pose]] = {}

    def register_queries(self, scenarios) -> None:
        for scenario in scenarios:
            self._query_hfov[scenario.query_id] = scenario.hfov

    def intrinsics(self, camera_id: str | None = None) -> CameraIntrinsics:
        hfov = self.hfov_deg if camera_id is None else self._query_hfov.get(camera_id, self.hfov_deg)
        return intrinsics_from_fov(hfov, self.image_width, self.image_height)

    def _camera_view(self, camera_id: str, view_yaw: float | None) -> tuple[np.ndarray, Pose]:
        """Sorted visible-landmark indices and the world->CV transform."""
        hfov = self._query_hfov.get(camera_id, self.hfov_deg)
        key = (camera_id, view_yaw, hfov)
        cached = self._visible_cache.get(key)
        if cached is not None:
            return cached
        body = self.scene.camera_truth.get(camera_id)
        if body is None:
            raise UnknownIdError(f"no camera for id {camera_id!r} in scene")
        if view_yaw is not None:
            body = Pose.from_centre(Rotation.yaw(view_yaw), body.camera_centre)
        cv = Pose(Rotation.from_matrix(CV_FROM_BODY), np.zeros(3)).compose(body)
        mask = _visible_mask(
            cv.transform(self.scene.landmarks), self.intrinsics(camera_id), self.quality.max_range_m
        )
        result = (np.nonzero(mask)[0], cv)
        self._visible_cache[key] = result
        return result

    def match_pair(self, handle: PairHandle) -> CorrespondenceSet:
        """Ground-truth correspondences for landmarks visible in both views.

        Reference-frame 3D points are exact; query pixels get gaussian
        noise of `pixel_noise_sigma`, and a seeded `outlier_rate`
        fraction (rounded to the nearest count) is replaced by uniform
        in-image pixels. Deterministic per (handle, quality, seed).
        """
        ref_idx, ref_cv = self._camera_view(handle.reference, handle.view_yaw)
        q_idx, q_cv = self._camera_view(handle.query, handle.query_view_yaw)
        shared = np.intersect1d(ref_idx, q_idx, assume_unique=True)

        rng = derive_rng(self.seed, "match", handle.reference, handle.query)
        quality = self.quality
        if quality.max_pairs is not None and shared.size > quality.max_pairs:
            shared = np.sort(rng.choice(shared, size=quality.max_pairs, replace=False))
        if shared.size < max(quality.min_shared_landmarks, 1):
            raise InsufficientOverlapError(
                f"pair ({handle.reference!r}, {handle.query!r}) shares {shared.size} landmarks "
                f"(minimum {quality.min_shared_landmarks})"
            )

        landmarks = self.scene.landmarks[shared]
        world = ref_cv.transform(landmarks)
        qcam = q_cv.transform(landmarks)
        K = self.intrinsics(handle.query)
        pixels = np.stack(
            [K.fx * qcam[:, 0] / qcam[:, 2] + K.cx, K.fy * qcam[:, 1] / qcam[:, 2] + K.cy], axis=1
        )
        if quality.pixel_noise_sigma > 0:
            pixels = pixels + rng.normal(0.0, quality.pixel_noise_sigma, size=pixels.shape)

        n = int(shared.size)
        n_outliers = int(np.floor(quality.outlier_rate * n + 0.5))
        outlier_ix: tuple[int, ...] = ()
        if n_outliers > 0:
            picked = np.sort(rng.choice(n, size=n_outliers, replace=False))
            pixels[picked, 0] = rng.uniform(0.0, K.width, size=n_outliers)
            pixels[picked, 1] = rng.uniform(0.0, K.height, size=n_outliers)
            outlier_ix = tuple(int(i) for i in picked)

        pairs = tuple(Correspondence(world=world[i], pixel=pixels[i]) for i in range(n))
        return CorrespondenceSet(pairs=pairs, source=self.name, outlier_indices=outlier_ix)


def synthetic_match(
    scene: SyntheticCity,
    handle: PairHandle,
    quality: MatchQuality,
    seed: int,
    *,
    image_width: int = 512,
    image_height: int = 384,
    hfov_deg: float = 90.0,
) -> CorrespondenceSet:
    """One-shot functional form of `SyntheticMatchBackend.match_pair`."""
    backend = SyntheticMatchBackend(
        scene, quality, seed, image_width=image_width, image_height=image_height, hfov_deg=hfov_deg
    )
    return backend.match_pair(handle)
