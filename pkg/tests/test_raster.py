import numpy as np

from ric.geometry import CameraIntrinsics
from ric.raster import rasterize_depth

INTR = CameraIntrinsics(fx=40.0, fy=40.0, cx=16.0, cy=12.0, width=32, height=24)


def plane_depth_at_pixels(vertices, intrinsics):
    """Analytic depth of the plane through three points at every pixel ray."""
    n = np.cross(vertices[1] - vertices[0], vertices[2] - vertices[0])
    rho = n @ vertices[0]
    rays = intrinsics.pixel_rays()
    return rho / (rays @ n)


def test_frontoparallel_triangle_exact_depth():
    verts = np.array([[-1.0, -1.0, 2.0], [1.5, -1.0, 2.0], [0.0, 1.5, 2.0]])
    depth = rasterize_depth(verts, np.array([[0, 1, 2]]), INTR)
    covered = np.isfinite(depth)
    assert covered[12, 16]
    assert np.max(np.abs(depth[covered] - 2.0)) < 1e-6


def test_slanted_triangle_matches_analytic_plane():
    verts = np.array([[-0.8, -0.6, 1.5], [0.9, -0.5, 2.5], [0.1, 0.8, 2.0]])
    depth = rasterize_depth(verts, np.array([[0, 1, 2]]), INTR)
    covered = np.isfinite(depth)
    assert np.count_nonzero(covered) > 50
    analytic = plane_depth_at_pixels(verts, INTR)
    assert np.max(np.abs(depth[covered] - analytic[covered])) < 1e-9


def test_empty_mesh_all_infinite():
    depth = rasterize_depth(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64), INTR)
    assert np.all(np.isinf(depth))


def test_triangle_behind_camera_not_rendered():
    verts = np.array([[-1.0, -1.0, -2.0], [1.0, -1.0, -2.0], [0.0, 1.0, -2.0]])
    depth = rasterize_depth(verts, np.array([[0, 1, 2]]), INTR)
    assert np.all(np.isinf(depth))


def test_triangle_straddling_near_plane_dropped():
    verts = np.array([[-1.0, -1.0, -0.5], [1.0, -1.0, 2.0], [0.0, 1.0, 2.0]])
    depth = rasterize_depth(verts, np.array([[0, 1, 2]]), INTR)
    assert np.all(np.isinf(depth))


def test_zbuffer_keeps_nearest_triangle():
    near = np.array([[-1.0, -1.0, 1.0], [1.5, -1.0, 1.0], [0.0, 1.5, 1.0]])
    far = near + np.array([0.0, 0.0, 1.0])
    verts = np.concatenate([far, near])
    depth = rasterize_depth(verts, np.array([[0, 1, 2], [3, 4, 5]]), INTR)
    assert abs(depth[12, 16] - 1.0) < 1e-9


def test_winding_does_not_matter():
    # Same coverage either way; depth agrees to summation-order noise.
    verts = np.array([[-1.0, -1.0, 2.0], [1.5, -1.0, 2.0], [0.0, 1.5, 2.0]])
    cw = rasterize_depth(verts, np.array([[0, 1, 2]]), INTR)
    ccw = rasterize_depth(verts, np.array([[0, 2, 1]]), INTR)
    assert np.array_equal(np.isfinite(cw), np.isfinite(ccw))
    both = np.isfinite(cw)
    assert np.max(np.abs(cw[both] - ccw[both])) < 1e-12


def test_many_small_triangles_chunking_consistent():
    # A grid of tiny triangles must tile the same as a few big ones.
    rng = np.random.default_rng(4)
    verts = []
    tris = []
    for i in range(40):
        base = rng.uniform([-0.6, -0.5, 1.2], [0.6, 0.5, 2.5])
        tri = base + rng.normal(scale=0.05, size=(3, 3))
        tris.append(np.arange(3) + 3 * i)
        verts.append(tri)
    verts = np.concatenate(verts)
    tris = np.array(tris)
    whole = rasterize_depth(verts, tris, INTR)
    # Render triangle-by-triangle and take the pixelwise minimum.
    acc = np.full(INTR.shape, np.inf)
    for t in tris:
        acc = np.minimum(acc, rasterize_depth(verts, t[None, :], INTR))
    assert np.array_equal(whole, acc)
