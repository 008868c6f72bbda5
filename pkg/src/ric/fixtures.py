"""Analytic desk-scale test scenes with exact depth and ground truth.

Each fixture is ray-cast analytically: the depth image is exact, and the
ground-truth cloud samples the full surfaces including parts occluded
from the camera (box back faces, the table strip shadowed by the object).
The camera sits at the origin looking along +z; the table is tilted
toward the camera like a desk seen from above.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, ColoredPointCloud, RgbdFrame, deproject
from .io import (
    DEFAULT_DEPTH_SCALE,
    SceneInput,
    write_depth_png,
    write_intrinsics,
    write_ply,
    write_rgb_png,
)

__all__ = ["Fixture", "FIXTURE_KINDS", "make_fixture", "write_fixture"]

FIXTURE_KINDS = ("plane", "box_on_plane", "sphere_on_plane")

TABLE_TILT_DEG = 30.0
TABLE_POINT = np.array([0.0, 0.2, 1.0])
TABLE_HALF_WIDTH = 0.55
TABLE_FORWARD = (-0.32, 0.55)
GT_SPACING = 0.006

TABLE_COLOR_A = (168, 125, 83)
TABLE_COLOR_B = (192, 152, 110)
BOX_FACE_COLORS = {
    "x+": (196, 70, 54),
    "x-": (160, 52, 40),
    "y+": (224, 150, 60),
    "y-": (120, 40, 34),
    "top": (235, 200, 90),
    "bottom": (90, 30, 26),
}
SPHERE_COLOR = (70, 110, 190)


@dataclass(frozen=True)
class Fixture:
    """Synthetic input frame plus exact full-surface ground truth."""

    kind: str
    frame: RgbdFrame
    ground_truth: ColoredPointCloud


def _table_frame():
    tilt = np.radians(TABLE_TILT_DEG)
    normal = np.array([0.0, -np.cos(tilt), -np.sin(tilt)])
    e1 = np.array([1.0, 0.0, 0.0])
    e2 = np.cross(normal, e1)
    return normal, e1, e2


def _checker(s1, s2, cell=0.08):
    board = (np.floor(s1 / cell) + np.floor(s2 / cell)) % 2
    a = np.asarray(TABLE_COLOR_A, dtype=np.float64)
    b = np.asarray(TABLE_COLOR_B, dtype=np.float64)
    return np.where(board[..., None] > 0, a, b).astype(np.uint8)


def _intersect_table(rays):
    """Z-depth of the table rectangle hit per pixel ray, 0 on miss."""
    normal, e1, e2 = _table_frame()
    numer = normal @ TABLE_POINT
    denom = rays @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 1e-12, numer / denom, 0.0)
    points = rays * t[..., None]
    rel = points - TABLE_POINT
    s1 = rel @ e1
    s2 = rel @ e2
    hit = (
        (t > 0.1)
        & (np.abs(s1) <= TABLE_HALF_WIDTH)
        & (s2 >= TABLE_FORWARD[0])
        & (s2 <= TABLE_FORWARD[1])
    )
    return np.where(hit, t, 0.0), s1, s2


def _box_geometry():
    normal, e1, e2 = _table_frame()
    half = np.array([0.09, 0.07, 0.11])
    base = TABLE_POINT + 0.06 * e2 - 0.02 * e1
    center = base + half[2] * normal
    axes = np.stack([e1, e2, normal])
    return center, axes, half


def _intersect_box(rays):
    """Z-depth of the entry point into the box, 0 on miss, plus face labels."""
    center, axes, half = _box_geometry()
    origin_local = -axes @ center
    dir_local = rays @ axes.T

    t_in = np.full(rays.shape[:2], -np.inf)
    t_out = np.full(rays.shape[:2], np.inf)
    enter_axis = np.zeros(rays.shape[:2], dtype=np.int64)
    for axis in range(3):
        o = origin_local[axis]
        d = dir_local[..., axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = np.where(np.abs(d) > 1e-12, (-half[axis] - o) / d, -np.inf)
            t2 = np.where(np.abs(d) > 1e-12, (half[axis] - o) / d, np.inf)
        parallel_miss = (np.abs(d) <= 1e-12) & (np.abs(o) > half[axis])
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        update = lo > t_in
        enter_axis = np.where(update, axis, enter_axis)
        t_in = np.maximum(t_in, lo)
        t_out = np.minimum(t_out, hi)
        t_out = np.where(parallel_miss, -np.inf, t_out)
    hit = (t_in <= t_out) & (t_in > 0.1)
    depth = np.where(hit, t_in, 0.0)

    entry = rays * np.where(hit, t_in, 1.0)[..., None]
    local = (entry - center) @ axes.T
    signs = np.take_along_axis(local, enter_axis[..., None], axis=-1)[..., 0] >= 0
    return depth, enter_axis, signs


def _box_face_color(enter_axis, signs):
    names = [("x-", "x+"), ("y-", "y+"), ("bottom", "top")]
    h, w = enter_axis.shape
    colors = np.zeros((h, w, 3), dtype=np.uint8)
    for axis in range(3):
        for positive in (False, True):
            sel = (enter_axis == axis) & (signs == positive)
            colors[sel] = BOX_FACE_COLORS[names[axis][positive]]
    return colors


def _sphere_geometry():
    normal, _, e2 = _table_frame()
    radius = 0.11
    center = TABLE_POINT + 0.05 * e2 + radius * normal
    return center, radius


def _intersect_sphere(rays):
    center, radius = _sphere_geometry()
    a = np.sum(rays * rays, axis=-1)
    b = -2.0 * (rays @ center)
    c = float(center @ center) - radius**2
    disc = b * b - 4.0 * a * c
    depth = np.zeros(rays.shape[:2])
    hit = disc > 0
    t = (-b[hit] - np.sqrt(disc[hit])) / (2.0 * a[hit])
    depth[hit] = np.where(t > 0.1, t, 0.0)
    return depth


def _rect_grid(spacing, lo1, hi1, lo2, hi2):
    s1 = np.arange(lo1, hi1 + spacing / 2, spacing)
    s2 = np.arange(lo2, hi2 + spacing / 2, spacing)
    g1, g2 = np.meshgrid(s1, s2)
    return g1.reshape(-1), g2.reshape(-1)


def _table_ground_truth(exclude=None):
    normal, e1, e2 = _table_frame()
    s1, s2 = _rect_grid(
        GT_SPACING, -TABLE_HALF_WIDTH, TABLE_HALF_WIDTH, TABLE_FORWARD[0], TABLE_FORWARD[1]
    )
    if exclude is not None:
        keep = ~exclude(s1, s2)
        s1, s2 = s1[keep], s2[keep]
    points = TABLE_POINT + s1[:, None] * e1 + s2[:, None] * e2
    return ColoredPointCloud(points, _checker(s1, s2))


def _box_ground_truth():
    """All faces except the bottom resting on the table."""
    center, axes, half = _box_geometry()
    clouds = []
    faces = [
        (0, 1, "x+"), (0, -1, "x-"),
        (1, 1, "y+"), (1, -1, "y-"),
        (2, 1, "top"),
    ]
    for axis, sign, name in faces:
        u_axis, v_axis = [i for i in range(3) if i != axis]
        su, sv = _rect_grid(
            GT_SPACING, -half[u_axis], half[u_axis], -half[v_axis], half[v_axis]
        )
        local = np.zeros((len(su), 3))
        local[:, axis] = sign * half[axis]
        local[:, u_axis] = su
        local[:, v_axis] = sv
        points = center + local @ axes
        colors = np.tile(np.array(BOX_FACE_COLORS[name], np.uint8), (len(points), 1))
        clouds.append(ColoredPointCloud(points, colors))
    return ColoredPointCloud.concatenate(clouds)


def _sphere_ground_truth():
    center, radius = _sphere_geometry()
    count = int(4 * np.pi * radius**2 / GT_SPACING**2)
    k = np.arange(count, dtype=np.float64)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * (k + 0.5) / count
    ring = np.sqrt(1.0 - z * z)
    theta = golden * k
    directions = np.stack([ring * np.cos(theta), ring * np.sin(theta), z], axis=1)
    points = center + radius * directions
    colors = np.tile(np.array(SPHERE_COLOR, np.uint8), (len(points), 1))
    return ColoredPointCloud(points, colors)


def default_intrinsics(width: int = 160, height: int = 120) -> CameraIntrinsics:
    focal = 0.875 * width
    return CameraIntrinsics(
        fx=focal,
        fy=focal,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
    )


def make_fixture(kind: str, width: int = 160, height: int = 120) -> Fixture:
    """Build one of the analytic scenes at the requested resolution."""
    if kind not in FIXTURE_KINDS:
        raise ValueError(f"unknown fixture kind {kind!r}; choose from {FIXTURE_KINDS}")
    intrinsics = default_intrinsics(width, height)
    rays = intrinsics.pixel_rays()

    if kind == "plane":
        depth = np.full(intrinsics.shape, 1.0)
        v, u = np.indices(intrinsics.shape)
        board = ((u // 10 + v // 10) % 2)[..., None]
        rgb = np.where(
            board > 0,
            np.asarray(TABLE_COLOR_A, np.float64),
            np.asarray(TABLE_COLOR_B, np.float64),
        ).astype(np.uint8)
        frame = RgbdFrame(rgb=rgb, depth=depth, intrinsics=intrinsics)
        return Fixture(kind=kind, frame=frame, ground_truth=deproject(frame))

    table_depth, s1, s2 = _intersect_table(rays)
    rgb = np.zeros((*intrinsics.shape, 3), dtype=np.uint8)
    table_hit = table_depth > 0
    rgb[table_hit] = _checker(s1, s2)[table_hit]

    if kind == "box_on_plane":
        obj_depth, enter_axis, signs = _intersect_box(rays)
        obj_rgb = _box_face_color(enter_axis, signs)
        center, axes, half = _box_geometry()
        _, e1, e2 = _table_frame()
        c1 = float((center - TABLE_POINT) @ e1)
        c2 = float((center - TABLE_POINT) @ e2)

        def footprint(g1, g2):
            return (np.abs(g1 - c1) <= half[0]) & (np.abs(g2 - c2) <= half[1])

        gt = ColoredPointCloud.concatenate(
            [_table_ground_truth(exclude=footprint), _box_ground_truth()]
        )
    else:
        obj_depth = _intersect_sphere(rays)
        obj_rgb = np.tile(np.array(SPHERE_COLOR, np.uint8), (*intrinsics.shape, 1))
        gt = ColoredPointCloud.concatenate([_table_ground_truth(), _sphere_ground_truth()])

    obj_hit = obj_depth > 0
    obj_front = obj_hit & (~table_hit | (obj_depth < table_depth))
    depth = np.where(obj_front, obj_depth, table_depth)
    rgb[obj_front] = obj_rgb[obj_front]
    frame = RgbdFrame(rgb=rgb, depth=depth, intrinsics=intrinsics)
    return Fixture(kind=kind, frame=frame, ground_truth=gt)


def write_fixture(
    fixture: Fixture, out_dir, depth_scale: float = DEFAULT_DEPTH_SCALE
) -> tuple[SceneInput, Path]:
    """Write rgb/depth/intrinsics plus the ground-truth PLY to a directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rgb_path = out_dir / "rgb.png"
    depth_path = out_dir / "depth.png"
    intrinsics_path = out_dir / "intrinsics.json"
    gt_path = out_dir / "ground_truth.ply"
    write_rgb_png(rgb_path, fixture.frame.rgb)
    write_depth_png(depth_path, fixture.frame.depth, depth_scale)
    write_intrinsics(intrinsics_path, fixture.frame.intrinsics, depth_scale)
    write_ply(gt_path, fixture.ground_truth)
    scene = SceneInput(
        rgb_path=rgb_path, depth_path=depth_path, intrinsics_path=intrinsics_path
    )
    return scene, gt_path
