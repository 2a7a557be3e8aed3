"""3-DoF poses, camera models and the analytic projection Jacobians.

Frames and units
----------------
* Ground camera frame: X right, Y down, Z forward, meters.
* Satellite metric frame: x east (image u), y down-image (image v), meters,
  origin at the map center ``(cu, cv)``.
* ``theta`` is the azimuth in radians, counter-clockwise positive, wrapped to
  ``(-pi, pi]``.  At ``theta = 0`` the camera looks along ``+y``.

The satellite view is modelled as an orthographic top-down camera: the point
height ``Y`` never changes the pixel it lands on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap radians to ``(-pi, pi]``; works on floats and arrays."""
    if np.isscalar(theta):
        t = float(theta)
        return t - TWO_PI * math.ceil((t - math.pi) / TWO_PI)
    theta = np.asarray(theta, dtype=np.float64)
    return theta - TWO_PI * np.ceil((theta - np.pi) / TWO_PI)


@dataclass(frozen=True)
class Pose:
    """Vehicle pose ``(x, y, theta)`` in the satellite metric frame."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        vals = (float(self.x), float(self.y), float(self.theta))
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"pose components must be finite, got {vals}")
        object.__setattr__(self, "x", vals[0])
        object.__setattr__(self, "y", vals[1])
        object.__setattr__(self, "theta", wrap_angle(vals[2]))

    @classmethod
    def from_array(cls, arr) -> Pose:
        a = np.asarray(arr, dtype=np.float64).reshape(3)
        return cls(a[0], a[1], a[2])

    @classmethod
    def from_degrees(cls, x: float, y: float, theta_deg: float) -> Pose:
        return cls(x, y, math.radians(theta_deg))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=np.float64)

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta)


@dataclass(frozen=True)
class Transform:
    """Planar rigid transform ``R(theta) @ v + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (2, 2):
            raise ValueError(f"rotation must be 2x2, got {r.shape}")
        if not np.allclose(r @ r.T, np.eye(2), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(2))

    def apply(self, xy: np.ndarray) -> np.ndarray:
        return np.asarray(xy, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class GroundIntrinsics:
    """Pinhole ground camera.  ``width``/``height`` default to ``2*cx``/``2*cy``."""

    fx: float
    fy: float
    cx: float
    cy: float
    z_min: float = 0.1
    width: float | None = None
    height: float | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.z_min > 0:
            raise ValueError("z_min must be positive")
        if self.width is None:
            object.__setattr__(self, "width", 2.0 * self.cx)
        if self.height is None:
            object.__setattr__(self, "height", 2.0 * self.cy)


@dataclass(frozen=True)
class SatelliteIntrinsics:
    """Orthographic satellite camera; pixel centers sit on integer coordinates."""

    meters_per_pixel: float
    cu: float
    cv: float
    width: int
    height: int

    def __post_init__(self):
        if not self.meters_per_pixel > 0:
            raise ValueError("meters_per_pixel must be positive")
        if not (0 <= self.cu < self.width and 0 <= self.cv < self.height):
            raise ValueError(
                f"principal point ({self.cu}, {self.cv}) outside {self.width}x{self.height} map"
            )

    @classmethod
    def centered(cls, width: int, height: int, meters_per_pixel: float) -> SatelliteIntrinsics:
        return cls(meters_per_pixel, width / 2.0, height / 2.0, width, height)

    def downsample(self) -> SatelliteIntrinsics:
        """Intrinsics of the map after 2x2 average pooling.

        Pooled pixel ``j`` covers fine pixels ``2j, 2j+1`` whose mean center is
        ``2j + 0.5``, so a fine coordinate ``u`` maps to ``(u - 0.5) / 2``.
        """
        return SatelliteIntrinsics(
            self.meters_per_pixel * 2.0,
            (self.cu - 0.5) / 2.0,
            (self.cv - 0.5) / 2.0,
            self.width // 2,
            self.height // 2,
        )

    @property
    def half_extent(self) -> tuple[float, float]:
        """Half of the map size in meters along (x, y)."""
        return (0.5 * self.width * self.meters_per_pixel, 0.5 * self.height * self.meters_per_pixel)


@dataclass(frozen=True)
class PointCloud:
    """``N x 3`` points in the ground camera frame."""

    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"point cloud must be N x 3, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def pose_to_transform(p: Pose) -> Transform:
    return Transform(rotation(p.theta), np.array([p.x, p.y]))


def apply_delta(p: Pose, dp) -> Pose:
    dp = np.asarray(dp, dtype=np.float64).reshape(3)
    if not np.isfinite(dp).all():
        raise ValueError(f"pose delta must be finite, got {dp}")
    return Pose(p.x + dp[0], p.y + dp[1], p.theta + dp[2])


def _points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def project_ground(K_g: GroundIntrinsics, cloud) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection; returns ``(uv[N, 2], valid[N])``.

    Points behind ``z_min`` or outside the image are masked, never dropped.
    """
    pts = _points(cloud)
    if pts.shape[0] == 0:
        raise ValueError("point cloud is empty")
    z = pts[:, 2]
    front = z >= K_g.z_min
    safe_z = np.where(front, z, 1.0)
    u = K_g.fx * pts[:, 0] / safe_z + K_g.cx
    v = K_g.fy * pts[:, 1] / safe_z + K_g.cy
    uv = np.stack([u, v], axis=-1)
    valid = front & (u >= 0) & (u <= K_g.width) & (v >= 0) & (v <= K_g.height)
    return uv, valid


def ground_plane_coords(poses, points) -> np.ndarray:
    """Satellite metric coordinates ``R(theta) (X, Z) + (x, y)``.

    ``poses`` is ``(..., 3)`` and ``points`` ``(..., N, 3)``; the leading
    dimensions broadcast.  Returns ``(..., N, 2)``.
    """
    poses = np.asarray(poses, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    c = np.cos(poses[..., 2])[..., None]
    s = np.sin(poses[..., 2])[..., None]
    X = points[..., 0]
    Z = points[..., 2]
    xs = c * X - s * Z + poses[..., 0:1]
    ys = s * X + c * Z + poses[..., 1:2]
    return np.stack([xs, ys], axis=-1)


def metric_to_pixel(K_s: SatelliteIntrinsics, xy: np.ndarray) -> np.ndarray:
    return np.stack(
        [K_s.cu + xy[..., 0] / K_s.meters_per_pixel, K_s.cv + xy[..., 1] / K_s.meters_per_pixel],
        axis=-1,
    )


def in_map(K_s: SatelliteIntrinsics, uv: np.ndarray) -> np.ndarray:
    """Pixels inside the bilinear interpolation region ``[0, W-1] x [0, H-1]``."""
    u = uv[..., 0]
    v = uv[..., 1]
    return (u >= 0) & (u <= K_s.width - 1) & (v >= 0) & (v <= K_s.height - 1)


def project_satellite_batch(K_s: SatelliteIntrinsics, poses, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`project_satellite` over leading pose/point dims."""
    uv = metric_to_pixel(K_s, ground_plane_coords(poses, points))
    return uv, in_map(K_s, uv)


def project_satellite(K_s: SatelliteIntrinsics, p: Pose, cloud) -> tuple[np.ndarray, np.ndarray]:
    pts = _points(cloud)
    if pts.shape[0] == 0:
        raise ValueError("point cloud is empty")
    return project_satellite_batch(K_s, p.as_array(), pts)


def satellite_jacobians(K_s: SatelliteIntrinsics, poses, points) -> np.ndarray:
    """``d(u, v) / d(x, y, theta)`` for every point, shape ``(..., N, 2, 3)``."""
    poses = np.asarray(poses, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    c = np.cos(poses[..., 2])[..., None]
    s = np.sin(poses[..., 2])[..., None]
    X = points[..., 0]
    Z = points[..., 2]
    inv = 1.0 / K_s.meters_per_pixel
    # R'(theta) (X, Z) = (-s X - c Z, c X - s Z)
    dxs_dth = -s * X - c * Z
    dys_dth = c * X - s * Z
    shape = np.broadcast_shapes(dxs_dth.shape, dys_dth.shape)
    J = np.zeros(shape + (2, 3))
    J[..., 0, 0] = inv
    J[..., 1, 1] = inv
    J[..., 0, 2] = inv * dxs_dth
    J[..., 1, 2] = inv * dys_dth
    return J


def satellite_jacobian(K_s: SatelliteIntrinsics, p: Pose, point) -> np.ndarray:
    """2x3 Jacobian of the satellite pixel of one point w.r.t. the pose."""
    point = np.asarray(point, dtype=np.float64).reshape(1, 3)
    return satellite_jacobians(K_s, p.as_array(), point)[0]


def sample_initial_pose(gt: Pose, radii, rng_seed) -> Pose:
    """``gt`` plus independent uniform noise in ``[-r, r]`` per component."""
    radii = np.asarray(radii, dtype=np.float64).reshape(3)
    if (radii < 0).any():
        raise ValueError(f"noise radii must be non-negative, got {radii}")
    rng = np.random.default_rng(rng_seed)
    noise = rng.uniform(-1.0, 1.0, size=3) * radii
    return Pose(gt.x + noise[0], gt.y + noise[1], gt.theta + noise[2])
