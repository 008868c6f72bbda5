"""Camera model, image/point-cloud conversions, and rigid transforms.

Coordinate conventions used throughout the package:

    Camera frame (right-handed): +x right, +y down, +z forward along the
    optical axis, matching pinhole image coordinates (u right, v down).
    Depth images store the camera-frame z coordinate in meters; 0 marks a
    missing measurement.

All types are immutable after construction (arrays are set read-only) and
safe to share across threads. Operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "RgbdFrame",
    "ColoredPointCloud",
    "PartialView",
    "ViewingSphere",
    "GeometryError",
    "deproject",
    "project",
    "transform",
    "viewing_sphere",
]

# Depth ties closer than this break toward the lower point index during
# z-buffering, which keeps projection deterministic.
ZBUFFER_TIE_EPS = 1e-9


class GeometryError(ValueError):
    """Raised for invalid geometric inputs (empty scenes, bad shapes)."""


def _frozen_array(a, dtype, shape=None) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=dtype)
    if shape is not None and arr.shape != shape:
        raise GeometryError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        """3x3 intrinsic matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) array of K^-1 @ (u, v, 1) for every pixel (unnormalized, z=1)."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = (uu - self.cx) / self.fx
        rays[..., 1] = (vv - self.cy) / self.fy
        rays[..., 2] = 1.0
        return rays


@dataclass(frozen=True)
class Pose:
    """Rigid transform p_out = R @ p_in + t (rotation 3x3, translation meters).

    When used as a camera pose for projection, it maps points from the
    cloud's frame into the target camera frame.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen_array(self.rotation, np.float64, (3, 3)))
        object.__setattr__(self, "translation", _frozen_array(self.translation, np.float64, (3,)))
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise GeometryError("rotation determinant must be +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, first: "Pose") -> "Pose":
        """Pose applying `first`, then `self` (self ∘ first)."""
        return Pose(self.rotation @ first.rotation,
                    self.rotation @ first.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class RgbdFrame:
    """Registered color + metric depth image pair with intrinsics."""

    rgb: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        h, w = self.intrinsics.shape
        object.__setattr__(self, "rgb", _frozen_array(self.rgb, np.uint8, (h, w, 3)))
        object.__setattr__(self, "depth", _frozen_array(self.depth, np.float64, (h, w)))
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise GeometryError("depth must be finite and nonnegative")


@dataclass(frozen=True)
class ColoredPointCloud:
    """N points (meters) with per-point RGB colors."""

    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        cols = np.ascontiguousarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(pts) != len(cols):
            raise GeometryError("points and colors must have equal length")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point coordinates must be finite")
        pts.setflags(write=False)
        cols.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "colors", cols)

    def __len__(self) -> int:
        return len(self.points)

    @staticmethod
    def empty() -> "ColoredPointCloud":
        return ColoredPointCloud(np.empty((0, 3)), np.empty((0, 3), dtype=np.uint8))

    @staticmethod
    def concatenate(clouds: "list[ColoredPointCloud]") -> "ColoredPointCloud":
        if not clouds:
            return ColoredPointCloud.empty()
        return ColoredPointCloud(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
        )


@dataclass(frozen=True)
class PartialView:
    """Sparse color/depth images rendered at a pose; depth 0 marks invalid."""

    rgb: np.ndarray
    depth: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        h, w = self.depth.shape
        object.__setattr__(self, "rgb", _frozen_array(self.rgb, np.uint8, (h, w, 3)))
        object.__setattr__(self, "depth", _frozen_array(self.depth, np.float64, (h, w)))
        valid = self.depth > 0 if self.valid is None else np.asarray(self.valid, bool)
        object.__setattr__(self, "valid", _frozen_array(valid, bool, (h, w)))
        if not np.array_equal(self.valid, self.depth > 0):
            raise GeometryError("valid mask must match nonzero depth")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class ViewingSphere:
    """Sphere centered at the scene centroid with the camera on its surface."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen_array(self.center, np.float64, (3,)))
        if not self.radius > 0:
            raise GeometryError("degenerate viewing sphere: radius must be positive")


def deproject(frame: RgbdFrame) -> ColoredPointCloud:
    """Lift every pixel with nonzero depth into a camera-frame 3D point.

    Point order is row-major over valid pixels. An all-zero depth image
    yields an empty cloud.
    """
    valid = frame.depth > 0
    rays = frame.intrinsics.pixel_rays()[valid]
    points = rays * frame.depth[valid][:, None]
    return ColoredPointCloud(points, frame.rgb[valid])


def project(cloud: ColoredPointCloud, intrinsics: CameraIntrinsics, pose: Pose) -> PartialView:
    """Render a point cloud into a camera at `pose` with z-buffering.

    Points are mapped into the camera frame, projected with nearest-pixel
    rounding, and the nearest point wins each pixel (ties within
    ZBUFFER_TIE_EPS go to the lower original index). Points behind the
    camera or outside the image are discarded. Uncovered pixels get depth 0
    and rgb 0.

    Args:
        cloud: Points in some source frame.
        intrinsics: Target camera intrinsics.
        pose: Maps source-frame points into the target camera frame.

    Returns:
        PartialView whose `valid` mask flags covered pixels.
    """
    h, w = intrinsics.shape
    depth = np.zeros((h, w))
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    if len(cloud) == 0:
        return PartialView(rgb, depth)

    p = pose.apply(cloud.points)
    z = p[:, 2]
    front = z > 0
    p, z = p[front], z[front]
    src = np.nonzero(front)[0]

    u = np.rint(intrinsics.fx * p[:, 0] / z + intrinsics.cx).astype(np.int64)
    v = np.rint(intrinsics.fy * p[:, 1] / z + intrinsics.cy).astype(np.int64)
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    u, v, z, src = u[inside], v[inside], z[inside], src[inside]
    if len(z) == 0:
        return PartialView(rgb, depth)

    pix = v * w + u
    # Pass 1: nearest depth per pixel. Pass 2: among points within the tie
    # tolerance of that depth, the lowest original index wins.
    zmin = np.full(h * w, np.inf)
    np.minimum.at(zmin, pix, z)
    contender = z <= zmin[pix] + ZBUFFER_TIE_EPS
    winner = np.full(h * w, np.iinfo(np.int64).max)
    np.minimum.at(winner, pix[contender], src[contender])

    keep = winner[pix] == src
    depth.flat[pix[keep]] = z[keep]
    rgb.reshape(-1, 3)[pix[keep]] = cloud.colors[src[keep]]
    return PartialView(rgb, depth)


def transform(cloud: ColoredPointCloud, pose: Pose) -> ColoredPointCloud:
    """Apply a rigid transform to every point; colors are unchanged."""
    if len(cloud) == 0:
        return cloud
    return ColoredPointCloud(pose.apply(cloud.points), cloud.colors)


def viewing_sphere(cloud: ColoredPointCloud, camera_position: np.ndarray) -> ViewingSphere:
    """Sphere centered at the cloud mean passing through the camera position."""
    if len(cloud) == 0:
        raise GeometryError("empty scene")
    center = cloud.points.mean(axis=0)
    radius = float(np.linalg.norm(np.asarray(camera_position, dtype=np.float64) - center))
    return ViewingSphere(center, radius)
