"""Radius-neighborhood indexing and the subsampling procedures of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud, RigidTransform, apply_transform, rotation_about_axis
from .validation import check_points, check_positive, readonly


@dataclass(frozen=True)
class NeighborLists:
    """Per-query neighbor indices in a flat (indices, splits) layout.

    ``indices[splits[q]:splits[q + 1]]`` are the neighbors of query ``q``,
    sorted ascending. The flat layout is what the convolution and scoring
    code consume; ``__getitem__`` gives the per-query view.
    """

    indices: np.ndarray
    splits: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        splits = np.asarray(self.splits, dtype=np.int64).reshape(-1)
        if splits.size == 0 or splits[0] != 0 or splits[-1] != idx.size:
            raise ValueError("splits must start at 0 and end at len(indices)")
        if np.any(np.diff(splits) < 0):
            raise ValueError("splits must be non-decreasing")
        object.__setattr__(self, "indices", readonly(idx))
        object.__setattr__(self, "splits", readonly(splits))

    def __len__(self) -> int:
        return self.splits.shape[0] - 1

    def __getitem__(self, q: int) -> np.ndarray:
        return self.indices[self.splits[q] : self.splits[q + 1]]

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.splits)

    @classmethod
    def from_lists(cls, lists) -> "NeighborLists":
        lists = [np.asarray(l, dtype=np.int64).reshape(-1) for l in lists]
        splits = np.zeros(len(lists) + 1, dtype=np.int64)
        if lists:
            splits[1:] = np.cumsum([l.size for l in lists])
        indices = np.concatenate(lists) if lists else np.empty(0, dtype=np.int64)
        return cls(indices, splits)


class NeighborhoodIndex:
    """Immutable kd-tree over a point cloud answering exact radius queries."""

    def __init__(self, cloud: PointCloud):
        if cloud.n < 1:
            raise ValueError("cannot index an empty cloud")
        self.cloud = cloud
        self._tree = cKDTree(cloud.points)

    @property
    def n(self) -> int:
        return self.cloud.n

    def query_radius(self, queries: np.ndarray, r: float) -> list[np.ndarray]:
        """Indices within the closed ball of radius ``r`` around each query."""
        queries = check_points(queries, "queries")
        raw = self._tree.query_ball_point(queries, r)
        return [np.sort(np.asarray(l, dtype=np.int64)) for l in raw]

    def query_nearest(self, queries: np.ndarray) -> np.ndarray:
        """Index of the nearest indexed point for each query."""
        queries = check_points(queries, "queries")
        _, idx = self._tree.query(queries, k=1)
        return np.asarray(idx, dtype=np.int64).reshape(-1)


def build_index(cloud: PointCloud) -> NeighborhoodIndex:
    return NeighborhoodIndex(cloud)


def radius_neighbors(index: NeighborhoodIndex, queries, r: float) -> NeighborLists:
    """All indexed points within distance ``r`` (closed ball) of each query.

    The closed-ball convention keeps self-queries non-empty: a point is always
    inside its own neighborhood, which the density normalization relies on.
    """
    r = check_positive(r, "radius")
    pts = queries.points if isinstance(queries, PointCloud) else queries
    return NeighborLists.from_lists(index.query_radius(pts, r))


def _grid_keys(points: np.ndarray, voxel: float, anchor: np.ndarray) -> np.ndarray:
    return np.floor((points - anchor) / voxel).astype(np.int64)


def grid_subsample(points: np.ndarray, voxel: float, anchor=None,
                   return_members: bool = False):
    """Barycenter of the points in each occupied voxel cell.

    Output cells are ordered lexicographically by cell index and cell members
    are accumulated in coordinate order, so the result depends only on the
    point set, not on input ordering. ``anchor`` defaults to the origin.

    With ``return_members`` also returns the flat member indices and their
    per-cell splits (aligned with the output rows), for callers that pool
    per-point data the same way the coordinates were pooled.
    """
    points = check_points(points, "points")
    voxel = check_positive(voxel, "voxel")
    anchor = np.zeros(3) if anchor is None else np.asarray(anchor, dtype=np.float64)
    keys = _grid_keys(points, voxel, anchor)
    # Canonical order: cell index first, then coordinates within the cell.
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0], keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    pts = points[order]
    boundaries = np.any(keys[1:] != keys[:-1], axis=1)
    starts = np.concatenate(([0], np.nonzero(boundaries)[0] + 1))
    sums = np.add.reduceat(pts, starts, axis=0)
    counts = np.diff(np.concatenate((starts, [pts.shape[0]])))
    barycenters = sums / counts[:, None]
    if not return_members:
        return barycenters
    splits = np.concatenate((starts, [pts.shape[0]])).astype(np.int64)
    return barycenters, order.astype(np.int64), splits


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel cell, at the cell barycenter.

    The grid is anchored at the coordinate origin with cell index
    floor(coordinate / voxel). Per-point attributes are dropped: barycenters
    are new points.
    """
    return PointCloud(grid_subsample(cloud.points, voxel))


def uniform_downsample(cloud: PointCloud, rate: int) -> PointCloud:
    """Keep every ``rate``-th point (indices 0, rate, 2*rate, ...) in order."""
    rate = int(rate)
    if rate < 1:
        raise ValueError("rate must be a positive integer")
    kept = cloud.points[::rate]
    attrs = {name: values[::rate] for name, values in cloud.attributes.items()}
    return PointCloud(kept, attrs)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation composed of per-axis angles drawn uniformly from [0, 2*pi)."""
    ax, ay, az = rng.uniform(0.0, 2.0 * np.pi, size=3)
    return (
        rotation_about_axis("z", az)
        @ rotation_about_axis("y", ay)
        @ rotation_about_axis("x", ax)
    )


def random_rotation_perturb(cloud: PointCloud, seed) -> tuple[PointCloud, RigidTransform]:
    """Rotate a cloud by a random seeded rotation; returns the applied transform.

    Angles about x, y and z are each drawn uniformly from [0, 2*pi), so the
    same seed always produces the same rotated cloud.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t = RigidTransform(random_rotation(rng), np.zeros(3))
    return apply_transform(cloud, t), t
