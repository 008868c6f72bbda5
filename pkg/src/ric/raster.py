"""Software triangle rasterizer producing z-buffered depth images.

Runs entirely on numpy: triangles are screen-space bounded, candidate
pixels enumerated per bounding box, inside-tests done with barycentric
coordinates, and depth resolved with a z-buffer. Depth is interpolated
perspective-correctly (1/z is affine in screen space), so planar surfaces
render their exact analytic depth.
"""

from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics

# Triangles with any vertex closer than this are dropped rather than
# clipped; at tabletop scale nothing legitimate sits on the camera plane.
NEAR_PLANE = 1e-6

# Budget of candidate (triangle, pixel) pairs processed per chunk.
_PAIR_BUDGET = 4_000_000


def rasterize_depth(
    vertices: np.ndarray,
    triangles: np.ndarray,
    intrinsics: CameraIntrinsics,
) -> np.ndarray:
    """Render triangles given in the camera frame into a depth image.

    Args:
        vertices: (N, 3) camera-frame positions.
        triangles: (T, 3) integer vertex indices.
        intrinsics: Target pinhole camera; pixel centers sit at integer
            coordinates.

    Returns:
        (H, W) float64 depth image; pixels covered by no triangle hold +inf.
    """
    h, w = intrinsics.shape
    depth = np.full(h * w, np.inf)
    if len(triangles) == 0 or len(vertices) == 0:
        return depth.reshape(h, w)

    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)

    z = vertices[:, 2]
    su = intrinsics.fx * vertices[:, 0] / np.where(z > 0, z, 1.0) + intrinsics.cx
    sv = intrinsics.fy * vertices[:, 1] / np.where(z > 0, z, 1.0) + intrinsics.cy
    inv_z = np.where(z > 0, 1.0 / np.where(z > 0, z, 1.0), 0.0)

    # No near-plane clipping: any triangle touching z < NEAR_PLANE is dropped.
    keep = np.all(z[triangles] >= NEAR_PLANE, axis=1)
    tris = triangles[keep]
    if len(tris) == 0:
        return depth.reshape(h, w)

    ua, ub, uc = su[tris[:, 0]], su[tris[:, 1]], su[tris[:, 2]]
    va, vb, vc = sv[tris[:, 0]], sv[tris[:, 1]], sv[tris[:, 2]]

    # Screen-space degenerate triangles cover no area; drop them early.
    area2 = (ub - ua) * (vc - va) - (uc - ua) * (vb - va)
    x0 = np.maximum(np.ceil(np.minimum.reduce([ua, ub, uc])), 0)
    x1 = np.minimum(np.floor(np.maximum.reduce([ua, ub, uc])), w - 1)
    y0 = np.maximum(np.ceil(np.minimum.reduce([va, vb, vc])), 0)
    y1 = np.minimum(np.floor(np.maximum.reduce([va, vb, vc])), h - 1)
    alive = (np.abs(area2) > 1e-14) & (x1 >= x0) & (y1 >= y0)
    if not np.any(alive):
        return depth.reshape(h, w)

    idx = np.nonzero(alive)[0]
    bbox_w = (x1[idx] - x0[idx] + 1).astype(np.int64)
    bbox_h = (y1[idx] - y0[idx] + 1).astype(np.int64)
    areas = bbox_w * bbox_h
    bounds = np.concatenate([[0], np.cumsum(areas)])

    iza = inv_z[tris[:, 0]]
    izb = inv_z[tris[:, 1]]
    izc = inv_z[tris[:, 2]]

    start = 0
    while start < len(idx):
        stop = int(np.searchsorted(bounds, bounds[start] + _PAIR_BUDGET, side="left"))
        stop = min(max(stop, start + 1), len(idx))
        sel = idx[start:stop]
        n_pairs = int(bounds[stop] - bounds[start])

        area_sel = areas[start:stop]
        tri_local = np.repeat(np.arange(len(sel)), area_sel)
        offsets = np.arange(n_pairs) - np.repeat(
            bounds[start:stop] - bounds[start], area_sel
        )
        bw = bbox_w[start:stop][tri_local]
        px = x0[sel][tri_local] + offsets % bw
        py = y0[sel][tri_local] + offsets // bw

        a2 = area2[sel][tri_local]
        pua, pva = ua[sel][tri_local], va[sel][tri_local]
        pub, pvb = ub[sel][tri_local], vb[sel][tri_local]
        puc, pvc = uc[sel][tri_local], vc[sel][tri_local]

        # All three edge functions are computed explicitly so the inside
        # test and interpolation are exactly invariant to triangle winding.
        l0 = ((pub - px) * (pvc - py) - (puc - px) * (pvb - py)) / a2
        l1 = ((puc - px) * (pva - py) - (pua - px) * (pvc - py)) / a2
        l2 = ((pua - px) * (pvb - py) - (pub - px) * (pva - py)) / a2
        inside = (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
        if np.any(inside):
            zi = 1.0 / (
                l0[inside] * iza[sel][tri_local[inside]]
                + l1[inside] * izb[sel][tri_local[inside]]
                + l2[inside] * izc[sel][tri_local[inside]]
            )
            pix = (py[inside] * w + px[inside]).astype(np.int64)
            np.minimum.at(depth, pix, zi)
        start = stop

    return depth.reshape(h, w)
