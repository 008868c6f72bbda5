"""Novel viewpoint selection on the viewing sphere.

Inpainting quality depends on how much known content survives the
rotation, summarized by the context ratio C = known pixels / all pixels.
For each of V evenly spaced tangent directions the camera walks along the
sphere's great circle (aimed at the sphere center) and keeps the step
whose context ratio lands closest to the target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import (
    ColoredPointCloud,
    GeometryError,
    PartialView,
    Pose,
    RgbdFrame,
    ViewingSphere,
    deproject,
    viewing_sphere,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ViewSelectionParams",
    "SelectedView",
    "context_ratio",
    "look_at_pose",
    "sphere_walk_pose",
    "select_viewpoints",
]


@dataclass(frozen=True)
class ViewSelectionParams:
    """Search configuration for viewpoint selection.

    num_viewpoints: number of tangent directions V.
    context_target: target context ratio in (0, 1).
    angle_step_deg: search increment along each great circle.
    max_angle_deg: rotation cap per direction.
    elevation_deg: optional offset of the walk's start along the sphere's
        vertical tangent, applied identically to every direction.
    """

    num_viewpoints: int = 10
    context_target: float = 0.4
    angle_step_deg: float = 2.0
    max_angle_deg: float = 90.0
    elevation_deg: float = 0.0

    def __post_init__(self):
        if self.num_viewpoints < 1:
            raise ValueError("num_viewpoints must be at least 1")
        if not (0.0 < self.context_target < 1.0):
            raise ValueError("context_target must lie in (0, 1)")
        if not (0.0 < self.angle_step_deg <= self.max_angle_deg):
            raise ValueError("angle_step_deg must lie in (0, max_angle_deg]")


@dataclass(frozen=True)
class SelectedView:
    """One chosen viewpoint with its achieved context ratio."""

    pose: Pose
    context: float
    direction_index: int
    angle_deg: float

    def __post_init__(self):
        if not (0.0 <= self.context <= 1.0):
            raise ValueError("context must lie in [0, 1]")


def context_ratio(view_or_mask) -> float:
    """Fraction of known pixels: valid pixels of a view, or zeros of a mask."""
    if isinstance(view_or_mask, PartialView):
        known = view_or_mask.valid
        return float(np.count_nonzero(known)) / known.size
    mask = np.asarray(view_or_mask, dtype=bool)
    return float(mask.size - np.count_nonzero(mask)) / mask.size


def _down_basis(forward: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right/down camera axes for a forward direction, minimizing roll."""
    hint = np.array([0.0, 1.0, 0.0])
    x = np.cross(hint, forward)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(np.array([0.0, 0.0, 1.0]), forward)
    x /= np.linalg.norm(x)
    y = np.cross(forward, x)
    return x, y


def look_at_pose(position, target) -> Pose:
    """Pose of a camera at `position` whose optical axis passes through `target`."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - position
    norm = np.linalg.norm(z)
    if norm < 1e-12:
        raise GeometryError("camera position coincides with the look target")
    z = z / norm
    x, y = _down_basis(z)
    rotation = np.stack([x, y, z])
    return Pose(rotation, -rotation @ position)


def _tangent_frame(sphere: ViewingSphere, camera_position: np.ndarray):
    w = (camera_position - sphere.center) / sphere.radius
    hint = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(hint, w)
    if np.linalg.norm(e1) < 1e-6:
        e1 = np.cross(np.array([1.0, 0.0, 0.0]), w)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(w, e1)
    return w, e1, e2


def sphere_walk_pose(
    sphere: ViewingSphere,
    camera_position,
    azimuth_rad: float,
    angle_rad: float,
    elevation_rad: float = 0.0,
) -> Pose:
    """Camera pose after walking `angle_rad` along one great circle.

    The walk starts at `camera_position` (optionally pre-rotated by the
    elevation offset along the vertical tangent), proceeds in the tangent
    direction given by `azimuth_rad`, and always aims at the sphere center.
    At angle 0 with no elevation the original camera pose (identity) is
    returned so an unrotated scene reproduces its own view exactly.
    """
    camera_position = np.asarray(camera_position, dtype=np.float64)
    if angle_rad == 0.0 and elevation_rad == 0.0:
        return Pose.identity()
    w, e1, e2 = _tangent_frame(sphere, camera_position)
    if elevation_rad != 0.0:
        start = np.cos(elevation_rad) * w + np.sin(elevation_rad) * e2
        w, e1, e2 = _tangent_frame(
            sphere, sphere.center + sphere.radius * start
        )
    direction = np.cos(azimuth_rad) * e1 + np.sin(azimuth_rad) * e2
    offset = np.cos(angle_rad) * w + np.sin(angle_rad) * direction
    position = sphere.center + sphere.radius * offset
    return look_at_pose(position, sphere.center)


def _projected_context(points: np.ndarray, intrinsics, pose: Pose, buffer: np.ndarray) -> float:
    """Context ratio of the plain projection validity mask (no colors)."""
    p = pose.apply(points)
    z = p[:, 2]
    front = z > 0
    p, z = p[front], z[front]
    u = np.rint(intrinsics.fx * p[:, 0] / z + intrinsics.cx).astype(np.int64)
    v = np.rint(intrinsics.fy * p[:, 1] / z + intrinsics.cy).astype(np.int64)
    inside = (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
    buffer[:] = False
    buffer[v[inside] * intrinsics.width + u[inside]] = True
    return float(np.count_nonzero(buffer)) / buffer.size


def select_viewpoints(frame: RgbdFrame, params: ViewSelectionParams) -> list[SelectedView]:
    """Pick one viewpoint per direction whose context is closest to target.

    For each of V evenly spaced azimuths around the camera-to-center axis,
    the camera walks the great circle in angle_step increments up to
    max_angle; at every step the input cloud is projected and the step
    minimizing |C - C*| wins (ties toward the smaller angle). If no step
    brings C down to the target, the max-angle step is returned with a
    warning so the pipeline still gets V views.
    """
    cloud = deproject(frame)
    if len(cloud) == 0:
        raise GeometryError("empty scene: frame has no valid depth")
    camera = np.zeros(3)
    sphere = viewing_sphere(cloud, camera)
    intrinsics = frame.intrinsics
    buffer = np.zeros(intrinsics.width * intrinsics.height, dtype=bool)

    elevation = np.radians(params.elevation_deg)
    steps = np.arange(
        0.0, params.max_angle_deg + 0.5 * params.angle_step_deg, params.angle_step_deg
    )
    selected = []
    for k in range(params.num_viewpoints):
        azimuth = 2.0 * np.pi * k / params.num_viewpoints
        best = None
        min_context = np.inf
        for angle_deg in steps:
            pose = sphere_walk_pose(
                sphere, camera, azimuth, np.radians(angle_deg), elevation
            )
            context = _projected_context(cloud.points, intrinsics, pose, buffer)
            min_context = min(min_context, context)
            score = abs(context - params.context_target)
            if best is None or score < best[0]:
                best = (score, angle_deg, context, pose)
        if min_context > params.context_target:
            angle_deg = steps[-1]
            pose = sphere_walk_pose(
                sphere, camera, azimuth, np.radians(angle_deg), elevation
            )
            context = _projected_context(cloud.points, intrinsics, pose, buffer)
            logger.warning(
                "direction %d: context never reached target %.2f "
                "(minimum %.3f); using max angle %.1f",
                k,
                params.context_target,
                min_context,
                angle_deg,
            )
            best = (abs(context - params.context_target), angle_deg, context, pose)
        _, angle_deg, context, pose = best
        selected.append(
            SelectedView(
                pose=pose,
                context=context,
                direction_index=k,
                angle_deg=float(angle_deg),
            )
        )
    return selected
