"""Normal-guided depth completion by sparse linear least squares.

Lifting an inpainted color image to 3D requires depth at pixels that only
carry synthesized color. Given sparse observed depth, per-pixel unit
normals, and occlusion-boundary probabilities, we solve for the depth
image d minimizing

    E = lambda_d * E_data + lambda_s * E_smooth + lambda_n * E_normal

    E_data   = sum_{u observed}        (d(u) - observed(u))^2
    E_smooth = sum_{(u,v) 4-neighbors} (d(u) - d(v))^2
    E_normal = sum_{(u,v) 4-neighbors} w_uv (n(u) . (d(v) r(v) - d(u) r(u)))^2

with r(u) = K^-1 (u, v, 1), so 3D positions are linear in the unknown
depths, and w_uv = (1 - b(u)) (1 - b(v)) blocking normal propagation
across likely occlusion boundaries. Neighbor sums run over ordered pixel
pairs. The normal term pushes the displacement between neighboring 3D
points to be orthogonal to the local normal, which is what extends
surfaces correctly into unobserved regions; the boundary weights keep
that propagation from crossing depth discontinuities.

The system is symmetric positive semidefinite and sparse, solved with
Jacobi-preconditioned conjugate gradients on the normal equations with a
fixed, deterministic iteration schedule.
"""

from __future__ import annotations

import base64
import logging
import threading
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import CameraIntrinsics

logger = logging.getLogger(__name__)

__all__ = [
    "NormalBoundaryMaps",
    "DepthSolveParams",
    "DepthSolveDiagnostics",
    "DepthSolveError",
    "NormalPredictorError",
    "estimate_normals_geometric",
    "predict_normals_remote",
    "RemoteNormalPredictor",
    "complete_depth",
    "evaluate_energy",
]

# Depth jump (meters) between adjacent pixels that the geometric estimator
# treats as an occlusion boundary: above sensor noise, below object size.
EDGE_THRESHOLD = 0.03


class DepthSolveError(Exception):
    """Depth optimization failed (no data, or no convergence)."""


class NormalPredictorError(Exception):
    """Remote normal predictor failure or contract violation."""


@dataclass(frozen=True)
class NormalBoundaryMaps:
    """Per-pixel unit normals (camera frame) and boundary probabilities."""

    normals: np.ndarray
    boundary: np.ndarray

    def __post_init__(self):
        normals = np.ascontiguousarray(self.normals, dtype=np.float64)
        boundary = np.ascontiguousarray(self.boundary, dtype=np.float64)
        if normals.ndim != 3 or normals.shape[2] != 3 or normals.shape[:2] != boundary.shape:
            raise ValueError("normals must be HxWx3 matching an HxW boundary map")
        norms = np.linalg.norm(normals, axis=-1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("normals must be unit length")
        if boundary.min() < 0.0 or boundary.max() > 1.0:
            raise ValueError("boundary probabilities must lie in [0, 1]")
        normals.setflags(write=False)
        boundary.setflags(write=False)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "boundary", boundary)

    @property
    def shape(self) -> tuple[int, int]:
        return self.boundary.shape


@dataclass(frozen=True)
class DepthSolveParams:
    """Objective weights and solver controls.

    The data weight dominates so observed pixels stay anchored. The
    smoothness weight must stay well below the normal weight: smoothing
    fights sloped surfaces, and anything near unit weight visibly flattens
    them. max_iters of None picks the 10 * H * sqrt(W) heuristic cap at
    solve time.
    """

    lambda_d: float = 1000.0
    lambda_s: float = 0.001
    lambda_n: float = 1.0
    solver_tol: float = 1e-8
    max_iters: int | None = None

    def __post_init__(self):
        if min(self.lambda_d, self.lambda_s, self.lambda_n) < 0:
            raise ValueError("term weights must be nonnegative")
        if max(self.lambda_d, self.lambda_s, self.lambda_n) <= 0:
            raise ValueError("at least one term weight must be positive")
        if self.solver_tol <= 0:
            raise ValueError("solver_tol must be positive")


@dataclass(frozen=True)
class DepthSolveDiagnostics:
    energy: float
    relative_residual: float
    iterations: int
    unknowns: int


def estimate_normals_geometric(
    depth: np.ndarray,
    intrinsics: CameraIntrinsics,
    edge_threshold: float = EDGE_THRESHOLD,
) -> NormalBoundaryMaps:
    """Normals and boundaries from depth alone (offline predictor stand-in).

    Normals are the normalized cross product of central-difference tangents
    of the deprojected surface, oriented toward the camera. A pixel is a
    boundary when any 4-neighbor depth jump exceeds edge_threshold. Pixels
    lacking the four valid neighbors get normal (0, 0, -1) and boundary 1.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    valid = depth > 0
    positions = intrinsics.pixel_rays() * depth[..., None]

    normals = np.zeros((h, w, 3))
    normals[..., 2] = -1.0
    boundary = np.ones((h, w))

    full = (
        valid[1:-1, 1:-1]
        & valid[1:-1, :-2]
        & valid[1:-1, 2:]
        & valid[:-2, 1:-1]
        & valid[2:, 1:-1]
    )
    tangent_u = positions[1:-1, 2:] - positions[1:-1, :-2]
    tangent_v = positions[2:, 1:-1] - positions[:-2, 1:-1]
    raw = np.cross(tangent_u, tangent_v)
    lengths = np.linalg.norm(raw, axis=-1)
    ok = full & (lengths > 1e-15)
    unit = np.zeros_like(raw)
    unit[ok] = raw[ok] / lengths[ok][:, None]
    # Orient toward the camera: flip normals pointing away from the origin.
    flip = np.sum(unit * positions[1:-1, 1:-1], axis=-1) > 0
    unit[flip & ok] *= -1.0
    normals[1:-1, 1:-1][ok] = unit[ok]

    jump = np.zeros((h, w))
    for dv, du in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        shifted = np.full((h, w), np.nan)
        vs = slice(max(dv, 0), h + min(dv, 0))
        us = slice(max(du, 0), w + min(du, 0))
        vd = slice(max(-dv, 0), h + min(-dv, 0))
        ud = slice(max(-du, 0), w + min(-du, 0))
        shifted[vd, ud] = depth[vs, us]
        with np.errstate(invalid="ignore"):
            both = valid & np.isfinite(shifted) & (shifted > 0)
            jump = np.where(both, np.maximum(jump, np.abs(depth - shifted)), jump)
    interior = np.zeros((h, w), dtype=bool)
    interior[1:-1, 1:-1] = ok
    boundary[interior] = (jump[interior] > edge_threshold).astype(float)
    return NormalBoundaryMaps(normals=normals, boundary=boundary)


class RemoteNormalPredictor:
    """HTTP client for a normal/boundary model server.

    Protocol: POST {"image": <base64 PNG RGB>} ->
    {"normals": <base64 float32 HxWx3 row-major LE>,
     "boundary": <base64 float32 HxW row-major LE>}.
    """

    def __init__(self, endpoint: str, api_key: str | None = None, timeout: float = 120.0, session=None):
        import requests

        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()
        self.calls = 0
        self._lock = threading.Lock()

    def predict(self, rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        import requests

        from .io import encode_png_rgb

        h, w = rgb.shape[:2]
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        with self._lock:
            self.calls += 1
        try:
            response = self.session.post(
                self.endpoint,
                json={"image": base64.b64encode(encode_png_rgb(rgb)).decode("ascii")},
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise NormalPredictorError(f"request failed: {exc}") from exc
        if response.status_code != 200:
            raise NormalPredictorError(f"HTTP {response.status_code}")
        try:
            body = response.json()
            normals = np.frombuffer(
                base64.b64decode(body["normals"]), dtype="<f4"
            ).reshape(h, w, 3)
            boundary = np.frombuffer(
                base64.b64decode(body["boundary"]), dtype="<f4"
            ).reshape(h, w)
        except (KeyError, ValueError) as exc:
            raise NormalPredictorError(f"malformed response: {exc}") from exc
        return normals.astype(np.float64), boundary.astype(np.float64)


def predict_normals_remote(rgb: np.ndarray, client) -> NormalBoundaryMaps:
    """Fetch maps from a model server and normalize them to the contract.

    `client` is any object with ``predict(rgb) -> (normals, boundary)``.
    Normals are renormalized to unit length (with a warning if they were
    far off); shape mismatches raise NormalPredictorError.
    """
    normals, boundary = client.predict(rgb)
    h, w = rgb.shape[:2]
    if normals.shape != (h, w, 3) or boundary.shape != (h, w):
        raise NormalPredictorError(
            f"predictor shape mismatch: normals {normals.shape}, boundary {boundary.shape} "
            f"for {h}x{w} input"
        )
    lengths = np.linalg.norm(normals, axis=-1)
    if np.any(lengths < 1e-12):
        raise NormalPredictorError("predictor returned zero-length normals")
    if np.max(np.abs(lengths - 1.0)) > 1e-3:
        logger.warning(
            "predictor normals deviate from unit length by up to %.3g; renormalizing",
            float(np.max(np.abs(lengths - 1.0))),
        )
    normals = normals / lengths[..., None]
    return NormalBoundaryMaps(normals=normals, boundary=np.clip(boundary, 0.0, 1.0))


def _ordered_edges(region: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ordered 4-neighbor pixel index pairs with both endpoints in region."""
    h, w = region.shape
    flat = np.arange(h * w).reshape(h, w)
    pairs_u = []
    pairs_v = []
    for dv, du in ((0, 1), (1, 0)):
        a = flat[: h - dv, : w - du]
        b = flat[dv:, du:]
        both = region[: h - dv, : w - du] & region[dv:, du:]
        pairs_u.append(a[both])
        pairs_v.append(b[both])
    u = np.concatenate(pairs_u + pairs_v)
    v = np.concatenate(pairs_v + pairs_u)
    return u, v


def _assemble(partial, maps, intrinsics, params, region):
    h, w = partial.shape
    rays = intrinsics.pixel_rays().reshape(-1, 3)
    normals = maps.normals.reshape(-1, 3)
    context_w = 1.0 - maps.boundary.reshape(-1)

    observed = (partial > 0) & region
    obs_idx = np.nonzero(observed.reshape(-1))[0]
    edge_u, edge_v = _ordered_edges(region)

    rows = [obs_idx]
    cols = [obs_idx]
    vals = [np.full(len(obs_idx), params.lambda_d)]

    if len(edge_u) and params.lambda_s > 0:
        ls = params.lambda_s
        rows += [edge_u, edge_v, edge_u, edge_v]
        cols += [edge_u, edge_v, edge_v, edge_u]
        ones = np.ones(len(edge_u))
        vals += [ls * ones, ls * ones, -ls * ones, -ls * ones]

    if len(edge_u) and params.lambda_n > 0:
        weight = params.lambda_n * context_w[edge_u] * context_w[edge_v]
        a_u = np.sum(normals[edge_u] * rays[edge_u], axis=1)
        a_v = np.sum(normals[edge_u] * rays[edge_v], axis=1)
        rows += [edge_u, edge_v, edge_u, edge_v]
        cols += [edge_u, edge_v, edge_v, edge_u]
        cross = -weight * a_u * a_v
        vals += [weight * a_u**2, weight * a_v**2, cross, cross]

    n_pixels = h * w
    a_full = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_pixels, n_pixels),
    ).tocsr()

    b_full = np.zeros(n_pixels)
    b_full[obs_idx] = params.lambda_d * partial.reshape(-1)[obs_idx]

    unknown = np.nonzero(region.reshape(-1))[0]
    a = a_full[unknown][:, unknown].tocsr()
    b = b_full[unknown]
    return a, b, unknown


def _cg_jacobi(a, b, x0, tol, max_iters):
    diag = a.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 0.0)
    b_norm = float(np.linalg.norm(b))
    x = x0.copy()
    r = b - a @ x
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    iterations = 0
    for iterations in range(1, max_iters + 1):
        if np.linalg.norm(r) <= tol * b_norm:
            iterations -= 1
            break
        ap = a @ p
        pap = float(p @ ap)
        if pap <= 0:
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    residual = float(np.linalg.norm(b - a @ x)) / b_norm
    return x, iterations, residual


def complete_depth(
    partial: np.ndarray,
    maps: NormalBoundaryMaps,
    intrinsics: CameraIntrinsics,
    params: DepthSolveParams,
    region: np.ndarray | None = None,
) -> tuple[np.ndarray, DepthSolveDiagnostics]:
    """Solve for complete depth over `region` given sparse observations.

    Args:
        partial: H x W depth with 0 at unobserved pixels.
        maps: Normal and boundary maps matching the image.
        intrinsics: Camera of the view being completed.
        params: Term weights and solver controls.
        region: Boolean H x W solve region; observed pixels are always
            included. None solves the full image. Pixels outside stay 0.

    Returns:
        (depth, diagnostics). Every region pixel connected to data gets a
        depth; fully disconnected pixels stay 0.

    Raises:
        DepthSolveError: no observed depth, or CG failed to reach
            solver_tol within the iteration cap.
    """
    partial = np.asarray(partial, dtype=np.float64)
    h, w = partial.shape
    if maps.shape != (h, w):
        raise ValueError("maps dimensions must match the depth image")
    observed = partial > 0
    if not np.any(observed):
        raise DepthSolveError("no observed depth to anchor the solve")
    if region is None:
        region = np.ones((h, w), dtype=bool)
    region = np.asarray(region, dtype=bool) | observed

    a, b, unknown = _assemble(partial, maps, intrinsics, params, region)

    # Unknowns with an empty row (isolated pixels with no data and no
    # neighbors in the region) are underdetermined; solve without them.
    diag = a.diagonal()
    connected = diag > 0
    if not np.all(connected):
        keep = np.nonzero(connected)[0]
        a = a[keep][:, keep].tocsr()
        b = b[keep]
        unknown = unknown[keep]

    mean_depth = float(partial[observed].mean())
    x0 = np.full(len(b), mean_depth)
    max_iters = params.max_iters
    if max_iters is None:
        max_iters = int(10 * h * np.sqrt(w))
    x, iterations, residual = _cg_jacobi(a, b, x0, params.solver_tol, max_iters)
    if residual > params.solver_tol:
        raise DepthSolveError(
            f"solver did not converge: relative residual {residual:.3e} after "
            f"{iterations} iterations"
        )

    completed = np.zeros(h * w)
    completed[unknown] = x
    completed = completed.reshape(h, w)
    energy = evaluate_energy(completed, partial, maps, intrinsics, params, region)
    return completed, DepthSolveDiagnostics(
        energy=energy,
        relative_residual=residual,
        iterations=iterations,
        unknowns=len(b),
    )


def evaluate_energy(
    depth: np.ndarray,
    partial: np.ndarray,
    maps: NormalBoundaryMaps,
    intrinsics: CameraIntrinsics,
    params: DepthSolveParams,
    region: np.ndarray | None = None,
) -> float:
    """Objective value at `depth`, computed directly from the term formulas."""
    depth = np.asarray(depth, dtype=np.float64)
    partial = np.asarray(partial, dtype=np.float64)
    h, w = partial.shape
    if region is None:
        region = np.ones((h, w), dtype=bool)
    region = np.asarray(region, dtype=bool) | (partial > 0)

    d = depth.reshape(-1)
    observed = ((partial > 0) & region).reshape(-1)
    data_term = float(np.sum((d[observed] - partial.reshape(-1)[observed]) ** 2))

    edge_u, edge_v = _ordered_edges(region)
    smooth_term = float(np.sum((d[edge_u] - d[edge_v]) ** 2))

    rays = intrinsics.pixel_rays().reshape(-1, 3)
    normals = maps.normals.reshape(-1, 3)
    context_w = 1.0 - maps.boundary.reshape(-1)
    displacement = d[edge_v, None] * rays[edge_v] - d[edge_u, None] * rays[edge_u]
    residuals = np.sum(normals[edge_u] * displacement, axis=1)
    normal_term = float(
        np.sum(context_w[edge_u] * context_w[edge_v] * residuals**2)
    )

    return (
        params.lambda_d * data_term
        + params.lambda_s * smooth_term
        + params.lambda_n * normal_term
    )
