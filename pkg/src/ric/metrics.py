"""Reconstruction quality metrics: voxel IoU, Chamfer distance, F-Score.

Voxelization first rescales the *joint* bounding box of both clouds
isotropically into the unit cube (longest side to 1, centered), so
relative placement survives the normalization; Chamfer distances can be
reported either in meters or on the same unit-cube normalization, and the
report records which.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ColoredPointCloud, Pose, RgbdFrame, deproject, transform

__all__ = [
    "MetricsError",
    "MetricsReport",
    "chamfer",
    "voxel_iou",
    "fscore",
    "assemble_ground_truth",
    "compute_report",
]

DEFAULT_RESOLUTION = 100
DEFAULT_TAU_FRACTION = 0.01
DEFAULT_CROP_BUFFER = 0.10


class MetricsError(ValueError):
    """Invalid metric inputs (empty point sets, bad options)."""


@dataclass(frozen=True)
class MetricsReport:
    """One evaluation row: IoU, both Chamfer directions and sum, F-Score.

    cd_space records whether Chamfer values are in meters ("metric") or on
    the joint unit-cube normalization ("normalized").
    """

    iou: float
    cd_gt_to_pred: float
    cd_pred_to_gt: float
    cd_sum: float
    fscore: float
    resolution: int
    cd_space: str

    def __post_init__(self):
        if not (0.0 <= self.iou <= 1.0) or not (0.0 <= self.fscore <= 1.0):
            raise MetricsError("iou and fscore must lie in [0, 1]")
        if min(self.cd_gt_to_pred, self.cd_pred_to_gt) < 0:
            raise MetricsError("chamfer distances must be nonnegative")
        if abs(self.cd_sum - (self.cd_gt_to_pred + self.cd_pred_to_gt)) > 1e-12:
            raise MetricsError("cd_sum must equal the sum of both directions")
        if self.cd_space not in ("metric", "normalized"):
            raise MetricsError("cd_space must be 'metric' or 'normalized'")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_points(x) -> np.ndarray:
    if isinstance(x, ColoredPointCloud):
        x = x.points
    points = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise MetricsError("empty point set")
    return points


def chamfer(x, y) -> float:
    """Directed Chamfer distance: mean over x of the nearest distance in y."""
    x = _as_points(x)
    y = _as_points(y)
    distances, _ = cKDTree(y).query(x, k=1)
    return float(np.mean(distances))


def _unit_cube(points_a: np.ndarray, points_b: np.ndarray):
    """Joint isotropic rescale of both clouds into the unit cube."""
    lo = np.minimum(points_a.min(axis=0), points_b.min(axis=0))
    hi = np.maximum(points_a.max(axis=0), points_b.max(axis=0))
    center = 0.5 * (lo + hi)
    extent = float(np.max(hi - lo))
    scale = 1.0 / extent if extent > 0 else 0.0
    return lambda p: (p - center) * scale + 0.5


def _occupancy(points: np.ndarray, resolution: int) -> np.ndarray:
    voxels = np.clip(np.floor(points * resolution).astype(np.int64), 0, resolution - 1)
    linear = (voxels[:, 0] * resolution + voxels[:, 1]) * resolution + voxels[:, 2]
    return np.unique(linear)


def voxel_iou(pred, gt, resolution: int = DEFAULT_RESOLUTION) -> float:
    """Occupied-voxel IoU after joint unit-cube normalization."""
    pred = _as_points(pred)
    gt = _as_points(gt)
    if resolution < 1:
        raise MetricsError("resolution must be positive")
    to_cube = _unit_cube(pred, gt)
    occ_pred = _occupancy(to_cube(pred), resolution)
    occ_gt = _occupancy(to_cube(gt), resolution)
    intersection = len(np.intersect1d(occ_pred, occ_gt, assume_unique=True))
    union = len(occ_pred) + len(occ_gt) - intersection
    return intersection / union


def fscore(pred, gt, tau_fraction: float = DEFAULT_TAU_FRACTION) -> float:
    """F-Score at a threshold of tau_fraction times the gt box diagonal."""
    pred = _as_points(pred)
    gt = _as_points(gt)
    if tau_fraction <= 0:
        raise MetricsError("tau_fraction must be positive")
    diagonal = float(np.linalg.norm(gt.max(axis=0) - gt.min(axis=0)))
    tau = tau_fraction * diagonal
    d_pred, _ = cKDTree(gt).query(pred, k=1)
    d_gt, _ = cKDTree(pred).query(gt, k=1)
    precision = float(np.mean(d_pred <= tau))
    recall = float(np.mean(d_gt <= tau))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def assemble_ground_truth(
    frames: list[tuple[RgbdFrame, Pose]],
    object_clouds: list[ColoredPointCloud],
    crop_buffer: float = DEFAULT_CROP_BUFFER,
) -> ColoredPointCloud:
    """Merge deprojected frames with object clouds, cropped around the objects.

    Each frame pose maps its camera frame into the common frame. The crop
    box is the bounding box of the object clouds expanded by crop_buffer on
    every side; with no object clouds nothing is cropped.
    """
    if not frames and not object_clouds:
        raise MetricsError("need at least one frame or object cloud")
    parts = [transform(deproject(frame), pose) for frame, pose in frames]
    parts += list(object_clouds)
    merged = ColoredPointCloud.concatenate(parts)
    if not object_clouds or len(merged) == 0:
        return merged
    object_points = np.concatenate([c.points for c in object_clouds])
    lo = object_points.min(axis=0) - crop_buffer
    hi = object_points.max(axis=0) + crop_buffer
    inside = np.all((merged.points >= lo) & (merged.points <= hi), axis=1)
    return ColoredPointCloud(merged.points[inside], merged.colors[inside])


def compute_report(
    pred,
    gt,
    resolution: int = DEFAULT_RESOLUTION,
    tau_fraction: float = DEFAULT_TAU_FRACTION,
    cd_space: str = "metric",
) -> MetricsReport:
    """Full metric suite for a predicted cloud against ground truth."""
    pred = _as_points(pred)
    gt = _as_points(gt)
    if cd_space == "normalized":
        to_cube = _unit_cube(pred, gt)
        cd_pred, cd_gt = to_cube(pred), to_cube(gt)
    elif cd_space == "metric":
        cd_pred, cd_gt = pred, gt
    else:
        raise MetricsError("cd_space must be 'metric' or 'normalized'")
    cd_gt_to_pred = chamfer(cd_gt, cd_pred)
    cd_pred_to_gt = chamfer(cd_pred, cd_gt)
    return MetricsReport(
        iou=voxel_iou(pred, gt, resolution),
        cd_gt_to_pred=cd_gt_to_pred,
        cd_pred_to_gt=cd_pred_to_gt,
        cd_sum=cd_gt_to_pred + cd_pred_to_gt,
        fscore=fscore(pred, gt, tau_fraction),
        resolution=resolution,
        cd_space=cd_space,
    )
