"""Surface-aware inpainting masks from frustum occupancy meshes.

Rotating a single RGB-D view leaves two kinds of empty pixels: truly
unknown regions, and regions where distant background wrongly shows
through next to foreground objects. To tell them apart we extrude every
observed surface point backward along its viewing ray into an occupancy
volume, triangulate it, and render that mesh from the new viewpoint.
Reprojected scene points that land behind the rendered volume are
occluded background: they are discarded, and their pixels join the
inpainting mask together with all empty pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraIntrinsics,
    ColoredPointCloud,
    GeometryError,
    PartialView,
    Pose,
    RgbdFrame,
    deproject,
    project,
)
from .raster import rasterize_depth

__all__ = [
    "FrustumParams",
    "FrustumMesh",
    "RENDER_DEPTH_EPS",
    "build_frustum_points",
    "triangulate_frustum",
    "build_frustum_mesh",
    "render_frustum_depth",
    "compute_mask",
    "surface_aware_mask",
]

# Slack when comparing reprojected depth against the rendered volume depth;
# without it rasterization noise makes surface points occlude themselves.
RENDER_DEPTH_EPS = 1e-4


@dataclass(frozen=True)
class FrustumParams:
    """Sampling of the occupancy volume behind observed surfaces.

    spacing_c: metric distance between consecutive samples along a ray.
    samples_m: number of samples per ray (volume depth = samples_m * spacing_c).
    grid_stride: pixel stride when subsampling rays from the image grid.
    """

    spacing_c: float = 0.01
    samples_m: int = 100
    grid_stride: int = 4

    def __post_init__(self):
        if self.spacing_c <= 0:
            raise ValueError("spacing_c must be positive")
        if self.samples_m < 1:
            raise ValueError("samples_m must be at least 1")
        if self.grid_stride < 1:
            raise ValueError("grid_stride must be at least 1")


@dataclass(frozen=True)
class FrustumMesh:
    """Triangulated occupancy volume in the original camera frame."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle index out of range")
        verts.setflags(write=False)
        tris.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)

    def __len__(self) -> int:
        return len(self.triangles)

    @staticmethod
    def empty() -> "FrustumMesh":
        return FrustumMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))


def build_frustum_points(
    frame: RgbdFrame, params: FrustumParams
) -> tuple[np.ndarray, np.ndarray]:
    """Sample points behind each observed surface along unit viewing rays.

    For every subsampled pixel with depth d > 0 the samples are
    x + i * spacing_c * r_hat, i = 1..samples_m, where x is the pixel's
    deprojection and r_hat its unit ray direction, so spacing_c is metric.

    Returns:
        points: (Gh, Gw, samples_m, 3) array; rows of invalid rays hold NaN.
        valid: (Gh, Gw) bool mask of rays with observed depth.

    Raises:
        GeometryError: if no subsampled pixel has depth ("empty frustum").
    """
    stride = params.grid_stride
    depth = frame.depth[::stride, ::stride]
    rays = frame.intrinsics.pixel_rays()[::stride, ::stride]
    valid = depth > 0
    if not np.any(valid):
        raise GeometryError("empty frustum: no valid depth samples")

    unit = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    surface = rays * depth[..., None]
    steps = np.arange(1, params.samples_m + 1) * params.spacing_c
    points = surface[:, :, None, :] + steps[None, None, :, None] * unit[:, :, None, :]
    points[~valid] = np.nan
    return points, valid


def triangulate_frustum(points: np.ndarray, valid: np.ndarray) -> FrustumMesh:
    """Connect the sampled volume into a triangle lattice.

    Each sample layer i is stitched across pixel-grid-adjacent rays into
    quads (two triangles), and consecutive layers are connected along every
    adjacent ray pair, closing the volume's side walls. Rays without depth
    are skipped, leaving holes. Zero-area triangles are filtered out.
    """
    gh, gw, m, _ = points.shape
    if gh < 1 or gw < 1 or not np.any(valid):
        return FrustumMesh.empty()

    vert_base = np.full((gh, gw), -1, dtype=np.int64)
    vert_base[valid] = np.arange(np.count_nonzero(valid), dtype=np.int64) * m
    vertices = points[valid].reshape(-1, 3)

    layers = np.arange(m, dtype=np.int64)
    tri_blocks = []

    def quads(i00, i01, i10, i11):
        # Two triangles per quad, one quad per sample layer in each array.
        t1 = np.stack([i00, i01, i11], axis=-1)
        t2 = np.stack([i00, i11, i10], axis=-1)
        return [t1.reshape(-1, 3), t2.reshape(-1, 3)]

    # Layer shells: 2x2 blocks of valid rays at each sample index.
    if gh >= 2 and gw >= 2:
        block = valid[:-1, :-1] & valid[:-1, 1:] & valid[1:, :-1] & valid[1:, 1:]
        if np.any(block):
            a = vert_base[:-1, :-1][block][:, None] + layers
            b = vert_base[:-1, 1:][block][:, None] + layers
            c = vert_base[1:, :-1][block][:, None] + layers
            d = vert_base[1:, 1:][block][:, None] + layers
            tri_blocks += quads(a, b, c, d)

    # Side walls: consecutive layers along each adjacent valid ray pair.
    if m >= 2:
        for pair in (
            (valid[:, :-1] & valid[:, 1:], vert_base[:, :-1], vert_base[:, 1:]),
            (valid[:-1, :] & valid[1:, :], vert_base[:-1, :], vert_base[1:, :]),
        ):
            mask, base_a, base_b = pair
            if not np.any(mask):
                continue
            a = base_a[mask][:, None] + layers[:-1]
            b = base_b[mask][:, None] + layers[:-1]
            tri_blocks += quads(a, b, a + 1, b + 1)

    if not tri_blocks:
        return FrustumMesh(vertices, np.empty((0, 3), dtype=np.int64))
    triangles = np.concatenate(tri_blocks)

    e1 = vertices[triangles[:, 1]] - vertices[triangles[:, 0]]
    e2 = vertices[triangles[:, 2]] - vertices[triangles[:, 0]]
    area = np.linalg.norm(np.cross(e1, e2), axis=1)
    return FrustumMesh(vertices, triangles[area > 1e-18])


def build_frustum_mesh(frame: RgbdFrame, params: FrustumParams) -> FrustumMesh:
    """Sample and triangulate the occupancy volume for one input frame.

    The mesh depends only on the input frame, so it should be built once
    and shared read-only across all viewpoints.
    """
    points, valid = build_frustum_points(frame, params)
    return triangulate_frustum(points, valid)


def render_frustum_depth(
    mesh: FrustumMesh, intrinsics: CameraIntrinsics, pose: Pose
) -> np.ndarray:
    """Z-buffered depth of the mesh seen from `pose`; +inf where uncovered."""
    if len(mesh) == 0:
        return np.full(intrinsics.shape, np.inf)
    return rasterize_depth(pose.apply(mesh.vertices), mesh.triangles, intrinsics)


def compute_mask(
    view_depth: np.ndarray,
    volume_depth: np.ndarray,
    eps: float = RENDER_DEPTH_EPS,
) -> np.ndarray:
    """Inpainting decision per pixel: no depth, or depth behind the volume."""
    return (view_depth <= 0) | (view_depth > volume_depth + eps)


def surface_aware_mask(
    frame: RgbdFrame,
    pose: Pose,
    params: FrustumParams,
    mesh: FrustumMesh | None = None,
) -> tuple[np.ndarray, PartialView, np.ndarray]:
    """Reproject a frame to a new pose and mask the inpaintable region.

    A pixel is masked when it received no scene point, or when the point it
    received lies behind the rendered occupancy volume (occluded background,
    which is also removed from the returned view).

    Args:
        frame: Input RGB-D frame.
        pose: Maps original-camera points into the new camera frame.
        params: Frustum sampling parameters.
        mesh: Optional precomputed frustum mesh for this frame.

    Returns:
        (mask, view, volume_depth): boolean H x W inpainting mask (True =
        inpaint), the occlusion-filtered sparse reprojection, and the
        rendered volume depth image (useful for debugging).
    """
    if mesh is None:
        mesh = build_frustum_mesh(frame, params)
    view = project(deproject(frame), frame.intrinsics, pose)
    volume_depth = render_frustum_depth(mesh, frame.intrinsics, pose)

    mask = compute_mask(view.depth, volume_depth)
    occluded = view.valid & mask
    if np.any(occluded):
        depth = view.depth.copy()
        rgb = view.rgb.copy()
        depth[occluded] = 0.0
        rgb[occluded] = 0
        view = PartialView(rgb, depth)

    return mask, view, volume_depth
