"""Robust camera geometry: rotations, pinhole projection, RANSAC + PnP.

Conventions
-----------
- Rotations are unit quaternions (w, x, y, z), canonical sign (first
  non-zero component positive).
- Euler angles are intrinsic X-Y-Z in degrees, so a rotation factors as
  ``R = Rx(x) @ Ry(y) @ Rz(z)``. In the world frame used by this package
  (x east/lateral, y north/forward, z up) the Z angle is the compass yaw,
  Y is roll about the forward axis and X is pitch about the lateral axis.
- A `Pose` is the rigid map ``y = R x + t`` from one frame into another.
  Camera extrinsics map scene coordinates into the camera frame; the
  camera centre is ``-R^T t``.
- Pinhole cameras use the computer-vision frame: x right, y down,
  z forward (the optical axis). `CV_FROM_BODY` converts from the
  body/world-style frame (x right, y forward, z up).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .angles import wrap_deg
from .errors import (
    BehindCameraError,
    DegenerateSolutionError,
    TooFewCorrespondencesError,
)

# Change of basis from body axes (x right, y forward, z up) to camera
# axes (x right, y down, z forward).
CV_FROM_BODY = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])

_UNIT_TOL = 1e-12
_MIN_CONSENSUS = 4


class Rotation:
    """Rotation stored as a unit quaternion (w, x, y, z)."""

    __slots__ = ("_q",)

    def __init__(self, w: float, x: float, y: float, z: float):
        q = np.array([w, x, y, z], dtype=float)
        norm = float(np.linalg.norm(q))
        if not math.isfinite(norm) or norm < _UNIT_TOL:
            raise ValueError("quaternion must be finite with non-zero norm")
        q /= norm
        # canonical sign: first non-zero component positive
        for component in q:
            if component != 0.0:
                if component < 0.0:
                    q = -q
                break
        self._q = q
        self._q.flags.writeable = False

    # -- constructors -------------------------------------------------

    @classmethod
    def identity(cls) -> Rotation:
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_quaternion(cls, wxyz) -> Rotation:
        w, x, y, z = (float(v) for v in wxyz)
        return cls(w, x, y, z)

    @classmethod
    def from_matrix(cls, matrix) -> Rotation:
        m = np.asarray(matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        trace = m[0, 0] + m[1, 1] + m[2, 2]
        if trace > 0.0:
            s = math.sqrt(trace + 1.0) * 2.0
            w = 0.25 * s
            x = (m[2, 1] - m[1, 2]) / s
            y = (m[0, 2] - m[2, 0]) / s
            z = (m[1, 0] - m[0, 1]) / s
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            w = (m[2, 1] - m[1, 2]) / s
            x = 0.25 * s
            y = (m[0, 1] + m[1, 0]) / s
            z = (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            w = (m[0, 2] - m[2, 0]) / s
            x = (m[0, 1] + m[1, 0]) / s
            y = 0.25 * s
            z = (m[1, 2] + m[2, 1]) / s
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            w = (m[1, 0] - m[0, 1]) / s
            x = (m[0, 2] + m[2, 0]) / s
            y = (m[1, 2] + m[2, 1]) / s
            z = 0.25 * s
        return cls(w, x, y, z)

    @classmethod
    def from_euler_xyz(cls, x_deg: float, y_deg: float, z_deg: float) -> Rotation:
        """Intrinsic X-Y-Z Euler angles in degrees."""
        hx, hy, hz = (math.radians(v) / 2.0 for v in (x_deg, y_deg, z_deg))
        cx, sx = math.cos(hx), math.sin(hx)
        cy, sy = math.cos(hy), math.sin(hy)
        cz, sz = math.cos(hz), math.sin(hz)
        # quaternion product qx * qy * qz
        return cls(
            cx * cy * cz - sx * sy * sz,
            sx * cy * cz + cx * sy * sz,
            cx * sy * cz - sx * cy * sz,
            cx * cy * sz + sx * sy * cz,
        )

    @classmethod
    def yaw(cls, yaw_deg: float) -> Rotation:
        """Pure compass-yaw rotation (about the up axis)."""
        return cls.from_euler_xyz(0.0, 0.0, yaw_deg)

    @classmethod
    def from_rotvec(cls, vec) -> Rotation:
        v = np.asarray(vec, dtype=float)
        angle = float(np.linalg.norm(v))
        if angle < 1e-12:
            half = 0.5
            return cls(1.0, *(v * half))
        axis = v / angle
        s = math.sin(angle / 2.0)
        return cls(math.cos(angle / 2.0), *(axis * s))

    # -- views ---------------------------------------------------------

    @property
    def quaternion(self) -> np.ndarray:
        return self._q.copy()

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self._q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )

    def as_euler_xyz(self) -> tuple[float, float, float]:
        """Intrinsic X-Y-Z angles in degrees; Y forced to [-90, 90].

        Within |Y| < 90 the decomposition is unique; at the gimbal locus
        (|Y| = 90) the Z angle is reported as 0.
        """
        m = self.as_matrix()
        sy = max(-1.0, min(1.0, m[0, 2]))
        y = math.asin(sy)
        if abs(sy) < 1.0 - 1e-12:
            x = math.atan2(-m[1, 2], m[2, 2])
            z = math.atan2(-m[0, 1], m[0, 0])
        else:
            x = math.atan2(m[2, 1], m[1, 1])
            z = 0.0
        return (math.degrees(x), math.degrees(y), math.degrees(z))

    def as_rotvec(self) -> np.ndarray:
        w = max(-1.0, min(1.0, float(self._q[0])))
        angle = 2.0 * math.acos(w)
        s = math.sqrt(max(0.0, 1.0 - w * w))
        if s < 1e-12:
            return np.array(self._q[1:]) * 2.0
        return np.array(self._q[1:]) * (angle / s)

    # -- algebra -------------------------------------------------------

    def compose(self, other: Rotation) -> Rotation:
        w1, x1, y1, z1 = self._q
        w2, x2, y2, z2 = other._q
        return Rotation(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def inverse(self) -> Rotation:
        w, x, y, z = self._q
        return Rotation(w, -x, -y, -z)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.as_matrix().T

    def slerp(self, other: Rotation, t: float) -> Rotation:
        q0 = self._q
        q1 = other._q.copy()
        dot = float(q0 @ q1)
        if dot < 0.0:
            q1 = -q1
            dot = -dot
        if dot > 1.0 - 1e-12:
            q = (1.0 - t) * q0 + t * q1
            return Rotation(*q)
        theta = math.acos(max(-1.0, min(1.0, dot)))
        s = math.sin(theta)
        q = (math.sin((1.0 - t) * theta) / s) * q0 + (math.sin(t * theta) / s) * q1
        return Rotation(*q)

    def angle_to(self, other: Rotation) -> float:
        """Geodesic angle between two rotations, degrees in [0, 180]."""
        rel = self.inverse().compose(other)._q
        return math.degrees(2.0 * math.atan2(float(np.linalg.norm(rel[1:])), abs(float(rel[0]))))

    def __repr__(self) -> str:
        w, x, y, z = self._q
        return f"Rotation(w={w:.9g}, x={x:.9g}, y={y:.9g}, z={z:.9g})"


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``y = rotation * x + translation`` between frames."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_centre(cls, rotation: Rotation, centre) -> Pose:
        """Pose whose source-frame camera centre is `centre`."""
        c = np.asarray(centre, dtype=float).reshape(3)
        return cls(rotation, -rotation.apply(c))

    @property
    def camera_centre(self) -> np.ndarray:
        return -self.rotation.inverse().apply(self.translation)

    def compose(self, other: Pose) -> Pose:
        """self after other: maps x through other, then through self."""
        return Pose(
            self.rotation.compose(other.rotation),
            self.rotation.apply(other.translation) + self.translation,
        )

    def inverse(self) -> Pose:
        rot_inv = self.rotation.inverse()
        return Pose(rot_inv, -rot_inv.apply(self.translation))

    def transform(self, points) -> np.ndarray:
        return self.rotation.apply(points) + self.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics, all values in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class Correspondence:
    """One 3D point in the reference camera frame and its query pixel."""

    world: np.ndarray
    pixel: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.world, dtype=float).reshape(3).copy()
        p = np.asarray(self.pixel, dtype=float).reshape(2).copy()
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(p))):
            raise ValueError("correspondence values must be finite")
        w.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "world", w)
        object.__setattr__(self, "pixel", p)


@dataclass(frozen=True)
class RansacConfig:
    """Budgets and thresholds for `pnp_ransac`.

    `epsilon` is the inlier reprojection threshold in pixels;
    `refine_iterations` bounds the damped least-squares polish of the
    winning hypothesis. The damping constant starts at 0.1.
    """

    epsilon: float = 2.0
    max_iterations: int = 100
    refine_iterations: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iterations < 1 or self.refine_iterations < 1:
            raise ValueError("iteration budgets must be >= 1")

    def with_seed(self, seed: int) -> RansacConfig:
        return RansacConfig(self.epsilon, self.max_iterations, self.refine_iterations, int(seed))


@dataclass(frozen=True)
class PoseEstimate:
    """Robust solve result.

    `inlier_ids` is the consensus set of the winning hypothesis (indices
    into the input correspondences); `pose` is that hypothesis refined on
    exactly this set, and `rms_reprojection` is the refined pose's RMS
    pixel error over it.
    """

    pose: Pose
    inlier_count: int
    inlier_ids: tuple[int, ...] = field(repr=False)
    rms_reprojection: float

    def __post_init__(self):
        if self.inlier_count != len(self.inlier_ids):
            raise ValueError("inlier_count must match inlier_ids")


def intrinsics_from_fov(hfov_deg: float, width: int, height: int) -> CameraIntrinsics:
    """Square-pixel intrinsics from a horizontal field of view."""
    if not 0.0 < hfov_deg < 180.0:
        raise ValueError(f"hfov must be in (0, 180), got {hfov_deg}")
    fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    return CameraIntrinsics(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def project(K: CameraIntrinsics, pose: Pose, point) -> np.ndarray:
    """Project one scene point to pixels; raises if it is behind the camera."""
    cam = pose.transform(np.asarray(point, dtype=float).reshape(3))
    if cam[2] <= 0.0:
        raise BehindCameraError(f"point has non-positive depth {cam[2]:.6g}")
    return np.array(
        [K.fx * cam[0] / cam[2] + K.cx, K.fy * cam[1] / cam[2] + K.cy]
    )


def reprojection_error(K: CameraIntrinsics, pose: Pose, corr: Correspondence) -> float:
    """Pixel distance between the observation and the projection.

    Behind-camera points return +inf so RANSAC scoring can treat them as
    outliers instead of aborting.
    """
    cam = pose.transform(corr.world)
    if cam[2] <= 0.0:
        return math.inf
    u = K.fx * cam[0] / cam[2] + K.cx
    v = K.fy * cam[1] / cam[2] + K.cy
    return math.hypot(u - corr.pixel[0], v - corr.pixel[1])


# ---------------------------------------------------------------------------
# minimal solver


def _bearings(K: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit rays through pixels in the camera frame, shape (n, 3)."""
    x = (pixels[:, 0] - K.cx) / K.fx
    y = (pixels[:, 1] - K.cy) / K.fy
    rays = np.stack([x, y, np.ones_like(x)], axis=1)
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def _real_quartic_roots(coeffs: np.ndarray) -> np.ndarray:
    """Real roots of monic-normalisable quartics, batched.

    coeffs has shape (m, 5), highest degree first. Returns (m, 4) with
    NaN padding; rows whose leading coefficient is negligible are all-NaN.
    """
    m = coeffs.shape[0]
    roots = np.full((m, 4), np.nan)
    scale = np.max(np.abs(coeffs), axis=1)
    valid = (scale > 0) & (np.abs(coeffs[:, 0]) > 1e-10 * scale)
    if not np.any(valid):
        return roots
    c = coeffs[valid] / coeffs[valid, :1]
    companion = np.zeros((c.shape[0], 4, 4))
    companion[:, 1, 0] = 1.0
    companion[:, 2, 1] = 1.0
    companion[:, 3, 2] = 1.0
    companion[:, :, 3] = -c[:, [4, 3, 2, 1]]
    eig = np.linalg.eigvals(companion)
    real = np.where(np.abs(eig.imag) < 1e-8 * (1.0 + np.abs(eig.real)), eig.real, np.nan)
    roots[valid] = real
    return roots


def _p3p_grunert(world: np.ndarray, rays: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched three-point pose candidates.

    world: (m, 3, 3) scene points, rays: (m, 3, 3) unit bearings.
    Returns (R, t, sample) stacked over all candidate solutions, where
    `sample` maps each candidate back to its input row.
    """
    p1, p2, p3 = world[:, 0], world[:, 1], world[:, 2]
    f1, f2, f3 = rays[:, 0], rays[:, 1], rays[:, 2]
    a2 = np.sum((p2 - p3) ** 2, axis=1)
    b2 = np.sum((p1 - p3) ** 2, axis=1)
    c2 = np.sum((p1 - p2) ** 2, axis=1)
    ca = np.sum(f2 * f3, axis=1)
    cb = np.sum(f1 * f3, axis=1)
    cg = np.sum(f1 * f2, axis=1)

    tiny = 1e-12
    ok = (a2 > tiny) & (b2 > tiny) & (c2 > tiny)
    b2s = np.where(ok, b2, 1.0)
    q = (a2 - c2) / b2s
    A4 = (q - 1.0) ** 2 - 4.0 * (c2 / b2s) * ca**2
    A3 = 4.0 * (q * (1.0 - q) * cb - (1.0 - (a2 + c2) / b2s) * ca * cg + 2.0 * (c2 / b2s) * ca**2 * cb)
    A2 = 2.0 * (
        q**2
        - 1.0
        + 2.0 * q**2 * cb**2
        + 2.0 * ((b2 - c2) / b2s) * ca**2
        - 4.0 * ((a2 + c2) / b2s) * ca * cb * cg
        + 2.0 * ((b2 - a2) / b2s) * cg**2
    )
    A1 = 4.0 * (-q * (1.0 + q) * cb + 2.0 * (a2 / b2s) * cg**2 * cb - (1.0 - (a2 + c2) / b2s) * ca * cg)
    A0 = (1.0 + q) ** 2 - 4.0 * (a2 / b2s) * cg**2

    coeffs = np.stack([A4, A3, A2, A1, A0], axis=1)
    coeffs[~ok] = 0.0
    v = _real_quartic_roots(coeffs)  # (m, 4)

    with np.errstate(invalid="ignore", divide="ignore"):
        den = 2.0 * (cg[:, None] - v * ca[:, None])
        u = ((q[:, None] - 1.0) * v**2 - 2.0 * q[:, None] * cb[:, None] * v + 1.0 + q[:, None]) / den
        s1sq = b2[:, None] / (1.0 + v**2 - 2.0 * v * cb[:, None])
        s1 = np.sqrt(np.where(s1sq > 0, s1sq, np.nan))
        s2 = u * s1
        s3 = v * s1

    good = np.isfinite(s1) & np.isfinite(s2) & np.isfinite(s3) & (s1 > 0) & (s2 > 0) & (s3 > 0)
    sample, rootix = np.nonzero(good)
    if sample.size == 0:
        return np.zeros((0, 3, 3)), np.zeros((0, 3)), sample

    depths = np.stack([s1[good], s2[good], s3[good]], axis=1)  # (k, 3)
    cam_pts = rays[sample] * depths[:, :, None]  # (k, 3, 3)
    world_pts = world[sample]

    # Kabsch alignment world -> camera, batched over k candidates
    wc = world_pts.mean(axis=1, keepdims=True)
    cc = cam_pts.mean(axis=1, keepdims=True)
    h = np.einsum("kni,knj->kij", world_pts - wc, cam_pts - cc)
    u_svd, _, vt = np.linalg.svd(h)
    det = np.linalg.det(np.einsum("kij,kjl->kil", np.transpose(vt, (0, 2, 1)), np.transpose(u_svd, (0, 2, 1))))
    d = np.repeat(np.eye(3)[None], sample.size, axis=0)
    d[:, 2, 2] = np.sign(det)
    r = np.einsum("kij,kjl,klm->kim", np.transpose(vt, (0, 2, 1)), d, np.transpose(u_svd, (0, 2, 1)))
    t = cc[:, 0] - np.einsum("kij,kj->ki", r, wc[:, 0])
    return r, t, sample


def _score_poses(
    rotations: np.ndarray,
    translations: np.ndarray,
    world: np.ndarray,
    pixels: np.ndarray,
    K: CameraIntrinsics,
) -> np.ndarray:
    """Squared reprojection errors, (h, n); +inf where depth <= 0."""
    cam = np.einsum("hij,nj->hni", rotations, world) + translations[:, None, :]
    z = cam[:, :, 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        u = K.fx * cam[:, :, 0] / z + K.cx
        v = K.fy * cam[:, :, 1] / z + K.cy
        err2 = (u - pixels[:, 0]) ** 2 + (v - pixels[:, 1]) ** 2
    return np.where(z > 0.0, err2, np.inf)


def _refine_damped(
    world: np.ndarray,
    pixels: np.ndarray,
    K: CameraIntrinsics,
    rotation: np.ndarray,
    translation: np.ndarray,
    iterations: int,
):
    """Damped least-squares polish of (R, t) on a fixed point set.

    Accepts a step only when the RMS error decreases, so the error is
    monotone non-increasing across the budgeted iterations.
    """
    r = rotation.copy()
    t = translation.copy()
    lam = 0.1

    def rms_of(rm, tv):
        err2 = _score_poses(rm[None], tv[None], world, pixels, K)[0]
        if np.any(~np.isfinite(err2)):
            return math.inf
        return math.sqrt(float(np.mean(err2)))

    best = rms_of(r, t)
    for _ in range(iterations):
        cam = world @ r.T + t
        z = cam[:, 2]
        if np.any(z <= 0):
            break
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
        residual = np.stack([u - pixels[:, 0], v - pixels[:, 1]], axis=1).reshape(-1)

        inv_z = 1.0 / z
        jac = np.zeros((world.shape[0], 2, 6))
        # d(pixel)/d(camera point)
        ju = np.stack([K.fx * inv_z, np.zeros_like(z), -K.fx * cam[:, 0] * inv_z**2], axis=1)
        jv = np.stack([np.zeros_like(z), K.fy * inv_z, -K.fy * cam[:, 1] * inv_z**2], axis=1)
        # d(camera point)/d(rotation vector) = -[cam]x, d/d(translation) = I
        skew = np.zeros((world.shape[0], 3, 3))
        skew[:, 0, 1] = -cam[:, 2]
        skew[:, 0, 2] = cam[:, 1]
        skew[:, 1, 0] = cam[:, 2]
        skew[:, 1, 2] = -cam[:, 0]
        skew[:, 2, 0] = -cam[:, 1]
        skew[:, 2, 1] = cam[:, 0]
        jac[:, 0, :3] = np.einsum("ni,nij->nj", ju, -skew)
        jac[:, 1, :3] = np.einsum("ni,nij->nj", jv, -skew)
        jac[:, 0, 3:] = ju
        jac[:, 1, 3:] = jv
        j = jac.reshape(-1, 6)

        jtj = j.T @ j
        jtr = j.T @ residual
        damped = jtj + lam * np.diag(np.diag(jtj))
        try:
            delta = np.linalg.solve(damped, -jtr)
        except np.linalg.LinAlgError:
            break
        r_new = Rotation.from_rotvec(delta[:3]).as_matrix() @ r
        t_new = t + delta[3:]
        candidate = rms_of(r_new, t_new)
        if candidate < best:
            improvement = best - candidate
            r, t, best = r_new, t_new, candidate
            lam = max(lam * 0.5, 1e-12)
            # converged: further gains are below any meaningful pose change
            if improvement < 1e-9 * max(best, 1e-6) or best < 1e-13:
                break
        else:
            lam *= 10.0
            if lam > 1e10:
                break
    return r, t, best


def pnp_ransac(
    correspondences,
    K: CameraIntrinsics,
    cfg: RansacConfig,
    init: Pose | None = None,
) -> PoseEstimate:
    """Robust pose from 3D-2D correspondences.

    Samples 4 correspondences per iteration (seeded, without
    replacement), solves the three-point minimal problem on a triple and
    disambiguates with the fourth point; a degenerate triple falls back
    to the remaining triples of the sample. The hypothesis with the most
    inliers wins (ties: lower inlier RMS, then lower hypothesis index; a
    supplied `init` is scored as hypothesis 0) and is polished by damped
    least squares on its consensus set.
    """
    pairs = list(correspondences)
    n = len(pairs)
    if n < 6:
        raise TooFewCorrespondencesError(f"need >= 6 correspondences, got {n}")
    world = np.stack([c.world for c in pairs])
    pixels = np.stack([c.pixel for c in pairs])
    rays = _bearings(K, pixels)

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed & 0xFFFFFFFFFFFFFFFF))
    samples = np.argsort(rng.random((cfg.max_iterations, n)), axis=1)[:, :4]

    triple_order = ((0, 1, 2, 3), (0, 1, 3, 2), (0, 2, 3, 1), (1, 2, 3, 0))
    hyp_r = [np.eye(3)[None][0:0]]
    hyp_t = [np.zeros((0, 3))]
    hyp_sample = [np.zeros(0, dtype=int)]
    unsolved = np.arange(cfg.max_iterations)
    for picks in triple_order:
        if unsolved.size == 0:
            break
        idx = samples[unsolved]
        tri, check = idx[:, list(picks[:3])], idx[:, picks[3]]
        r_cand, t_cand, local = _p3p_grunert(world[tri], rays[tri])
        if local.size:
            # disambiguate with the 4th point of each sample
            cam = np.einsum("kij,kj->ki", r_cand, world[check[local]]) + t_cand
            z = cam[:, 2]
            with np.errstate(invalid="ignore", divide="ignore"):
                u = K.fx * cam[:, 0] / z + K.cx
                v = K.fy * cam[:, 1] / z + K.cy
                px = pixels[check[local]]
                e4 = np.where(z > 0, (u - px[:, 0]) ** 2 + (v - px[:, 1]) ** 2, np.inf)
            finite = np.isfinite(e4)
            if np.any(finite):
                cand_ix = np.nonzero(finite)[0]
                by_sample = np.lexsort((e4[finite], local[finite]))
                samp_sorted = local[finite][by_sample]
                first = np.ones(samp_sorted.size, dtype=bool)
                first[1:] = samp_sorted[1:] != samp_sorted[:-1]
                chosen = cand_ix[by_sample[first]]
                solved_rows = samp_sorted[first]
                hyp_r.append(r_cand[chosen])
                hyp_t.append(t_cand[chosen])
                hyp_sample.append(unsolved[solved_rows])
                solved_mask = np.zeros(unsolved.size, dtype=bool)
                solved_mask[solved_rows] = True
                unsolved = unsolved[~solved_mask]

    rotations = np.concatenate(hyp_r)
    translations = np.concatenate(hyp_t)
    order = np.concatenate(hyp_sample)
    if init is not None:
        rotations = np.concatenate([init.rotation.as_matrix()[None], rotations])
        translations = np.concatenate([init.translation[None], translations])
        order = np.concatenate([[-1], order])

    if rotations.shape[0] == 0:
        raise DegenerateSolutionError("no P3P hypothesis could be formed")

    # stable hypothesis ordering: init first, then sample index
    sort_ix = np.argsort(order, kind="stable")
    rotations, translations = rotations[sort_ix], translations[sort_ix]

    err2 = _score_poses(rotations, translations, world, pixels, K)
    inlier = err2 <= cfg.epsilon**2
    counts = inlier.sum(axis=1)
    with np.errstate(invalid="ignore"):
        sums = np.where(inlier, err2, 0.0).sum(axis=1)
        rms = np.sqrt(np.divide(sums, np.maximum(counts, 1)))
    best_ix = int(np.lexsort((np.arange(counts.size), rms, -counts))[0])
    best_count = int(counts[best_ix])
    if best_count < _MIN_CONSENSUS:
        raise DegenerateSolutionError(
            f"best hypothesis has {best_count} inliers (< {_MIN_CONSENSUS})"
        )

    ids = np.nonzero(inlier[best_ix])[0]
    r_fit, t_fit, fit_rms = _refine_damped(
        world[ids], pixels[ids], K, rotations[best_ix], translations[best_ix], cfg.refine_iterations
    )
    return PoseEstimate(
        pose=Pose(Rotation.from_matrix(r_fit), t_fit),
        inlier_count=best_count,
        inlier_ids=tuple(int(i) for i in ids),
        rms_reprojection=float(fit_rms),
    )


def relative_pose_from_matches(matches, K: CameraIntrinsics, cfg: RansacConfig, init: Pose | None = None) -> PoseEstimate:
    """Query pose in the reference camera frame from a correspondence set."""
    return pnp_ransac(matches.pairs, K, cfg, init=init)


# ---------------------------------------------------------------------------
# rotation statistics


def weighted_rotation_error(r_q: Rotation, r_ref: Rotation, weights=(1.0, 0.25, 1.0)) -> float:
    """Weighted norm of the wrapped per-axis Euler X-Y-Z differences, degrees."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (3,) or np.any(w <= 0):
        raise ValueError("weights must be three positive values")
    dq = np.array(r_q.as_euler_xyz())
    dr = np.array(r_ref.as_euler_xyz())
    delta = wrap_deg(dq - dr)
    return float(np.sqrt(np.sum((w * delta) ** 2)))


def median_rotation(rotations) -> Rotation:
    """Per-axis circular median of Euler X-Y-Z angles.

    Each axis's angles are unwrapped about their circular mean before the
    median; an even count takes the lower-middle element so the result is
    always built from observed angles.
    """
    rots = list(rotations)
    if not rots:
        raise ValueError("median_rotation needs a non-empty list")
    eulers = np.array([r.as_euler_xyz() for r in rots])
    medians = []
    for axis in range(3):
        ang = eulers[:, axis]
        rad = np.radians(ang)
        mean = math.degrees(math.atan2(float(np.mean(np.sin(rad))), float(np.mean(np.cos(rad)))))
        unwrapped = mean + wrap_deg(ang - mean)
        unwrapped.sort()
        medians.append(float(unwrapped[(len(rots) - 1) // 2]))
    return Rotation.from_euler_xyz(*(wrap_deg(m) for m in medians))
