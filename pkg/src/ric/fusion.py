"""Cross-viewpoint consistency filtering and merging.

Synthesized geometry is only trusted when independently predicted by
multiple viewpoints: a point from view i survives when at least
`min_other_views` distinct other views place a point within `radius` of
it (closed ball). Survivors are concatenated by view id, preserving each
view's original point order. Neighbor queries run on a uniform voxel hash
grid with cell size equal to the radius, which is exactly equivalent to
brute force.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ColoredPointCloud

__all__ = ["FusionParams", "ViewCloud", "consistency_filter"]

# Grid cells per axis are packed into a 63-bit key; scenes wider than
# 2^21 cells along one axis would collide.
_KEY_BITS = 21


@dataclass(frozen=True)
class FusionParams:
    """Support radius (meters) and how many distinct other views must agree."""

    radius: float = 0.01
    min_other_views: int = 2

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.min_other_views < 0:
            raise ValueError("min_other_views must be nonnegative")


@dataclass(frozen=True)
class ViewCloud:
    """One viewpoint's predicted cloud in the original camera frame."""

    cloud: ColoredPointCloud
    view_id: int


def _cell_keys(cells: np.ndarray, origin: np.ndarray, extent: np.ndarray) -> np.ndarray:
    shifted = cells - origin
    if np.any(extent >= (1 << _KEY_BITS)):
        raise ValueError(
            "scene too large for the voxel hash grid at this radius; "
            "increase the radius or crop the scene"
        )
    return (
        (shifted[:, 0] << (2 * _KEY_BITS)) | (shifted[:, 1] << _KEY_BITS) | shifted[:, 2]
    )


def consistency_filter(views: list[ViewCloud], params: FusionParams) -> ColoredPointCloud:
    """Keep points supported by at least min_other_views distinct other views.

    The result concatenates survivors ordered by view_id and, within a
    view, by original point order. The outcome equals an exhaustive
    pairwise-distance support count.
    """
    views = sorted(views, key=lambda vc: vc.view_id)
    ids = [vc.view_id for vc in views]
    if len(set(ids)) != len(ids):
        raise ValueError("view ids must be unique")
    if not views:
        return ColoredPointCloud.empty()

    points = np.concatenate([vc.cloud.points for vc in views])
    if len(points) == 0:
        return ColoredPointCloud.empty()
    view_index = np.repeat(
        np.arange(len(views), dtype=np.int64), [len(vc.cloud) for vc in views]
    )

    radius = params.radius
    cells = np.floor(points / radius).astype(np.int64)
    origin = cells.min(axis=0) - 1
    extent = cells.max(axis=0) + 2 - origin
    keys = _cell_keys(cells, origin, extent)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]

    n = len(points)
    n_words = (len(views) + 63) // 64
    support = np.zeros((n, n_words), dtype=np.uint64)
    radius_sq = radius * radius

    # A ball of one cell size never spans more than the 27 neighbor cells.
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                neighbor = cells + np.array([dx, dy, dz], dtype=np.int64)
                nkeys = _cell_keys(neighbor, origin, extent)
                lo = np.searchsorted(sorted_keys, nkeys, side="left")
                hi = np.searchsorted(sorted_keys, nkeys, side="right")
                counts = hi - lo
                total = int(counts.sum())
                if total == 0:
                    continue
                query = np.repeat(np.arange(n, dtype=np.int64), counts)
                starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
                positions = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
                candidate = order[np.repeat(lo, counts) + positions]

                distinct = view_index[candidate] != view_index[query]
                query, candidate = query[distinct], candidate[distinct]
                delta = points[candidate] - points[query]
                within = np.einsum("ij,ij->i", delta, delta) <= radius_sq
                query, candidate = query[within], candidate[within]
                other = view_index[candidate]
                np.bitwise_or.at(
                    support,
                    (query, other >> 6),
                    np.uint64(1) << (other & 63).astype(np.uint64),
                )

    votes = np.bitwise_count(support).sum(axis=1)
    keep = votes >= params.min_other_views
    return ColoredPointCloud(
        points[keep], np.concatenate([vc.cloud.colors for vc in views])[keep]
    )
