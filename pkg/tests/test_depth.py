import base64

import numpy as np
import pytest

from ric.geometry import CameraIntrinsics
from ric.depth import (
    DepthSolveError,
    DepthSolveParams,
    NormalBoundaryMaps,
    NormalPredictorError,
    RemoteNormalPredictor,
    complete_depth,
    estimate_normals_geometric,
    evaluate_energy,
    predict_normals_remote,
)

INTR = CameraIntrinsics(fx=50.0, fy=50.0, cx=19.5, cy=14.5, width=40, height=30)


def frontoparallel_maps(shape):
    normals = np.zeros((*shape, 3))
    normals[..., 2] = -1.0
    return NormalBoundaryMaps(normals=normals, boundary=np.zeros(shape))


def plane_maps(intr, normal):
    normals = np.broadcast_to(np.asarray(normal, float), (*intr.shape, 3)).copy()
    return NormalBoundaryMaps(normals=normals, boundary=np.zeros(intr.shape))


def slanted_plane_depth(intr, normal, rho):
    rays = intr.pixel_rays()
    return rho / (rays @ np.asarray(normal, float))


def sphere_depth(intr, center, radius):
    """Front-surface z-depth of a sphere, 0 where the ray misses."""
    rays = intr.pixel_rays()
    a = np.sum(rays * rays, axis=-1)
    b = -2.0 * (rays @ np.asarray(center, float))
    c = float(center @ center) - radius**2
    disc = b * b - 4 * a * c
    depth = np.zeros(intr.shape)
    hit = disc > 0
    depth[hit] = (-b[hit] - np.sqrt(disc[hit])) / (2 * a[hit])
    depth[depth < 0] = 0.0
    return depth


class TestGeometricNormals:
    def test_frontoparallel_plane(self):
        maps = estimate_normals_geometric(np.full(INTR.shape, 1.0), INTR)
        interior = maps.normals[1:-1, 1:-1]
        assert np.max(np.abs(interior - [0.0, 0.0, -1.0])) < 1e-9
        assert np.max(maps.boundary[1:-1, 1:-1]) == 0.0

    def test_sphere_normals_radial(self):
        import scipy.ndimage as ndi

        intr = CameraIntrinsics(fx=200.0, fy=200.0, cx=79.5, cy=59.5, width=160, height=120)
        center = np.array([0.0, 0.0, 2.0])
        radius = 0.5
        depth = sphere_depth(intr, center, radius)
        maps = estimate_normals_geometric(depth, intr)
        points = intr.pixel_rays() * depth[..., None]
        analytic = (points - center) / radius
        # Normals are defined where all four neighbors hit the sphere; stay
        # away from the silhouette where the surface turns edge-on.
        cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        interior = ndi.binary_erosion(depth > 0, structure=cross)
        interior &= np.abs(analytic[..., 2]) > 0.45
        interior[[0, -1], :] = False
        interior[:, [0, -1]] = False
        cosine = np.sum(maps.normals * analytic, axis=-1)
        assert np.all(cosine[interior] > np.cos(np.radians(2.0)))

    def test_depth_step_marks_boundary(self):
        depth = np.full(INTR.shape, 1.0)
        depth[:, 20:] = 1.5
        maps = estimate_normals_geometric(depth, INTR)
        assert np.all(maps.boundary[5:-5, 19] == 1.0)
        assert np.all(maps.boundary[5:-5, 20] == 1.0)
        assert np.all(maps.boundary[5:-5, 5:15] == 0.0)

    def test_small_step_below_threshold_not_boundary(self):
        depth = np.full(INTR.shape, 1.0)
        depth[:, 20:] = 1.02
        maps = estimate_normals_geometric(depth, INTR)
        assert np.all(maps.boundary[5:-5, 18:22] == 0.0)

    def test_missing_neighbors_get_default(self):
        depth = np.zeros(INTR.shape)
        depth[10, 10] = 1.0
        maps = estimate_normals_geometric(depth, INTR)
        assert np.allclose(maps.normals[10, 10], [0.0, 0.0, -1.0])
        assert maps.boundary[10, 10] == 1.0

    def test_unit_norm_everywhere(self):
        rng = np.random.default_rng(0)
        depth = np.abs(rng.normal(1.5, 0.2, size=INTR.shape)) + 0.2
        maps = estimate_normals_geometric(depth, INTR)
        norms = np.linalg.norm(maps.normals, axis=-1)
        assert np.max(np.abs(norms - 1.0)) < 1e-6


class TestCompleteDepth:
    def test_fully_observed_returns_input(self):
        depth = np.full(INTR.shape, 1.0)
        maps = frontoparallel_maps(INTR.shape)
        completed, diag = complete_depth(depth, maps, INTR, DepthSolveParams())
        assert np.max(np.abs(completed - depth)) < 1e-6
        assert diag.unknowns == depth.size

    def test_frontoparallel_plane_recovery(self):
        rng = np.random.default_rng(1)
        truth = np.full(INTR.shape, 1.0)
        partial = truth.copy()
        partial[rng.random(INTR.shape) < 0.5] = 0.0
        maps = frontoparallel_maps(INTR.shape)
        completed, _ = complete_depth(partial, maps, INTR, DepthSolveParams())
        assert np.max(np.abs(completed - truth)) < 1e-4

    def test_slanted_plane_recovery(self):
        rng = np.random.default_rng(2)
        tilt = np.radians(20.0)
        normal = np.array([np.sin(tilt), 0.0, -np.cos(tilt)])
        rho = normal @ np.array([0.0, 0.0, 1.0])
        truth = slanted_plane_depth(INTR, normal, rho)
        partial = truth.copy()
        partial[rng.random(INTR.shape) < 0.5] = 0.0
        completed, _ = complete_depth(
            partial, plane_maps(INTR, normal), INTR, DepthSolveParams()
        )
        assert np.max(np.abs(completed - truth)) < 1e-3

    def test_boundary_blocks_normal_propagation(self):
        # Observed tilted outer plane, a closed boundary ring, and an
        # unobserved interior: the interior must come out constant.
        shape = INTR.shape
        partial = np.full(shape, 1.0)
        inner = np.zeros(shape, bool)
        inner[12:18, 16:24] = True
        ring = np.zeros(shape, bool)
        ring[11:19, 15:25] = True
        ring &= ~inner
        partial[inner] = 0.0
        normals = np.zeros((*shape, 3))
        normals[..., 2] = -1.0
        boundary = np.zeros(shape)
        boundary[ring] = 1.0
        maps = NormalBoundaryMaps(normals=normals, boundary=boundary)
        completed, _ = complete_depth(partial, maps, INTR, DepthSolveParams())
        spread = completed[inner].max() - completed[inner].min()
        assert spread < 1e-6
        assert abs(completed[inner].mean() - 1.0) < 1e-4

    def test_scale_equivariance(self):
        rng = np.random.default_rng(3)
        partial = np.full(INTR.shape, 1.3)
        partial[rng.random(INTR.shape) < 0.4] = 0.0
        maps = frontoparallel_maps(INTR.shape)
        params = DepthSolveParams()
        base, _ = complete_depth(partial, maps, INTR, params)
        scaled, _ = complete_depth(partial * 2.0, maps, INTR, params)
        assert np.max(np.abs(scaled - 2.0 * base)) / np.max(np.abs(base)) < 1e-9

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        partial = np.full(INTR.shape, 1.0)
        partial[rng.random(INTR.shape) < 0.5] = 0.0
        maps = frontoparallel_maps(INTR.shape)
        a, _ = complete_depth(partial, maps, INTR, DepthSolveParams())
        b, _ = complete_depth(partial, maps, INTR, DepthSolveParams())
        assert np.array_equal(a, b)

    def test_no_observations_raises(self):
        maps = frontoparallel_maps(INTR.shape)
        with pytest.raises(DepthSolveError, match="no observed depth"):
            complete_depth(np.zeros(INTR.shape), maps, INTR, DepthSolveParams())

    def test_nonconvergence_raises_with_residual(self):
        # A slanted plane keeps the constant initial guess off the optimum.
        rng = np.random.default_rng(5)
        tilt = np.radians(20.0)
        normal = np.array([np.sin(tilt), 0.0, -np.cos(tilt)])
        partial = slanted_plane_depth(INTR, normal, normal @ np.array([0.0, 0.0, 1.0]))
        partial[rng.random(INTR.shape) < 0.5] = 0.0
        params = DepthSolveParams(solver_tol=1e-14, max_iters=1)
        with pytest.raises(DepthSolveError, match="residual"):
            complete_depth(partial, plane_maps(INTR, normal), INTR, params)

    def test_restricted_region_leaves_outside_at_zero(self):
        partial = np.zeros(INTR.shape)
        partial[10:20, 10:20] = 1.0
        region = np.zeros(INTR.shape, bool)
        region[8:22, 8:22] = True
        maps = frontoparallel_maps(INTR.shape)
        completed, _ = complete_depth(partial, maps, INTR, DepthSolveParams(), region=region)
        assert np.all(completed[~region] == 0.0)
        assert np.all(completed[region] > 0.0)

    def test_energy_not_worse_than_constant_fill(self):
        rng = np.random.default_rng(6)
        tilt = np.radians(10.0)
        normal = np.array([np.sin(tilt), 0.0, -np.cos(tilt)])
        truth = slanted_plane_depth(INTR, normal, normal @ np.array([0.0, 0.0, 1.0]))
        partial = truth.copy()
        partial[rng.random(INTR.shape) < 0.5] = 0.0
        maps = plane_maps(INTR, normal)
        params = DepthSolveParams()
        completed, diag = complete_depth(partial, maps, INTR, params)
        fill = partial.copy()
        fill[partial == 0] = partial[partial > 0].mean()
        assert diag.energy <= evaluate_energy(fill, partial, maps, INTR, params) + 1e-12

    def test_gradient_vanishes_at_solution(self):
        # Central differences are exact for a quadratic, so the finite
        # difference gradient at the minimizer reflects only solver error.
        rng = np.random.default_rng(7)
        partial = np.full(INTR.shape, 1.0)
        partial[rng.random(INTR.shape) < 0.5] = 0.0
        maps = frontoparallel_maps(INTR.shape)
        params = DepthSolveParams()
        completed, _ = complete_depth(partial, maps, INTR, params)
        observed = partial > 0
        scale = 2.0 * params.lambda_d * np.linalg.norm(partial[observed])
        step = 1e-3
        coords = list(zip(rng.integers(1, 29, 20), rng.integers(1, 39, 20)))
        for i, j in coords:
            plus = completed.copy()
            plus[i, j] += step
            minus = completed.copy()
            minus[i, j] -= step
            grad = (
                evaluate_energy(plus, partial, maps, INTR, params)
                - evaluate_energy(minus, partial, maps, INTR, params)
            ) / (2 * step)
            assert abs(grad) / scale < 1e-5


class TestRemotePredictor:
    class EchoClient:
        def __init__(self, normals, boundary):
            self.normals = normals
            self.boundary = boundary

        def predict(self, rgb):
            return self.normals, self.boundary

    def test_passthrough_with_renormalization(self):
        h, w = 6, 8
        rng = np.random.default_rng(8)
        normals = rng.normal(size=(h, w, 3))
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        boundary = rng.random((h, w))
        maps = predict_normals_remote(
            np.zeros((h, w, 3), np.uint8), self.EchoClient(normals, boundary)
        )
        assert np.max(np.abs(maps.normals - normals)) < 1e-9
        assert np.array_equal(maps.boundary, boundary)

    def test_non_unit_normals_renormalized(self, caplog):
        h, w = 4, 4
        normals = np.zeros((h, w, 3))
        normals[..., 2] = -3.0
        with caplog.at_level("WARNING"):
            maps = predict_normals_remote(
                np.zeros((h, w, 3), np.uint8), self.EchoClient(normals, np.zeros((h, w)))
            )
        assert "renormalizing" in caplog.text
        assert np.allclose(maps.normals[..., 2], -1.0)

    def test_shape_mismatch_raises(self):
        client = self.EchoClient(np.zeros((2, 2, 3)), np.zeros((2, 2)))
        with pytest.raises(NormalPredictorError, match="predictor shape mismatch"):
            predict_normals_remote(np.zeros((4, 4, 3), np.uint8), client)

    def test_http_wire_format(self, http_server_factory):
        h, w = 5, 7
        rng = np.random.default_rng(9)
        normals = rng.normal(size=(h, w, 3))
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        boundary = rng.random((h, w))

        def handler(path, payload):
            assert "image" in payload
            return 200, {
                "normals": base64.b64encode(
                    normals.astype("<f4").tobytes()
                ).decode(),
                "boundary": base64.b64encode(
                    boundary.astype("<f4").tobytes()
                ).decode(),
            }

        server = http_server_factory(handler)
        client = RemoteNormalPredictor(server.url)
        rgb = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        maps = predict_normals_remote(rgb, client)
        assert np.max(np.abs(maps.normals - normals)) < 1e-6
        assert np.max(np.abs(maps.boundary - boundary)) < 1e-6

    def test_http_error_raises(self, http_server_factory):
        server = http_server_factory(lambda path, payload: (200, {}))
        server.fail_next(1)
        client = RemoteNormalPredictor(server.url)
        with pytest.raises(NormalPredictorError):
            predict_normals_remote(np.zeros((4, 4, 3), np.uint8), client)
