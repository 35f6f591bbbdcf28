"""Shared value types and exact rigid-geometry operations.

All types are immutable after construction (arrays are flagged read-only), so
instances can be shared freely across threads. The operations are pure
functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import (
    as_float_array,
    check_matrix,
    check_points,
    check_vector,
    readonly,
)

ROTATION_TOL = 1e-9  # per-entry tolerance on R^T R = I and det(R) = +1


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points in meters with optional scalar attributes.

    Coordinates must be finite and the cloud non-empty; both are enforced at
    construction so downstream code never has to re-check.
    """

    points: np.ndarray
    attributes: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pts = check_points(self.points)
        object.__setattr__(self, "points", readonly(pts))
        attrs = {}
        for name, values in self.attributes.items():
            values = as_float_array(values, f"attribute {name!r}").reshape(-1)
            if values.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"attribute {name!r} has {values.shape[0]} entries for "
                    f"{pts.shape[0]} points"
                )
            attrs[name] = readonly(values)
        object.__setattr__(self, "attributes", attrs)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """An SE(3) pose: proper rotation matrix plus translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = check_matrix(self.rotation, (3, 3), "rotation")
        trans = check_vector(self.translation, "translation")
        err = rot.T @ rot - np.eye(3)
        if np.max(np.abs(err)) > ROTATION_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", readonly(rot))
        object.__setattr__(self, "translation", readonly(trans))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        # (R, t)^-1 = (R^T, -R^T t); no matrix inversion needed.
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        """Apply to an (N, 3) coordinate array; returns a new array."""
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation


@dataclass(frozen=True)
class FeatureMap:
    """Dense per-point features: raw non-negative responses and unit-row descriptors.

    ``descriptors`` rows have unit L2 norm except where the matching response
    row is identically zero, in which case the descriptor row is zero too.
    """

    responses: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        resp = as_float_array(self.responses, "responses")
        desc = as_float_array(self.descriptors, "descriptors")
        if resp.ndim != 2 or resp.shape != desc.shape:
            raise ValueError(
                f"responses {resp.shape} and descriptors {desc.shape} must be "
                "matching 2-D matrices"
            )
        if resp.size and resp.min() < 0.0:
            raise ValueError("responses must be elementwise >= 0")
        norms = np.linalg.norm(desc, axis=1)
        zero_resp = ~resp.any(axis=1)
        bad = ~zero_resp & (np.abs(norms - 1.0) > 1e-6)
        if np.any(bad) or np.any(zero_resp & (norms != 0.0)):
            raise ValueError("descriptor rows must have unit norm (zero only for zero responses)")
        object.__setattr__(self, "responses", readonly(resp))
        object.__setattr__(self, "descriptors", readonly(desc))

    @classmethod
    def from_responses(cls, responses: np.ndarray) -> "FeatureMap":
        """Build the descriptor matrix by L2-normalizing response rows."""
        resp = as_float_array(responses, "responses")
        norms = np.linalg.norm(resp, axis=1, keepdims=True)
        safe = np.where(norms > 0.0, norms, 1.0)
        return cls(resp, resp / safe)

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def channels(self) -> int:
        return self.responses.shape[1]


@dataclass(frozen=True)
class ScoreMap:
    """Per-point detection scores with the per-channel diagnostics behind them."""

    scores: np.ndarray
    saliency: np.ndarray
    channel_max: np.ndarray

    def __post_init__(self):
        scores = as_float_array(self.scores, "scores").reshape(-1)
        saliency = as_float_array(self.saliency, "saliency")
        channel_max = as_float_array(self.channel_max, "channel_max")
        if scores.size and scores.min() < 0.0:
            raise ValueError("scores must be >= 0")
        if saliency.shape != channel_max.shape or saliency.shape[0] != scores.shape[0]:
            raise ValueError("saliency/channel_max shapes must match the score vector")
        if channel_max.size and (channel_max.min() < 0.0 or channel_max.max() > 1.0):
            raise ValueError("channel_max entries must lie in [0, 1]")
        object.__setattr__(self, "scores", readonly(scores))
        object.__setattr__(self, "saliency", readonly(saliency))
        object.__setattr__(self, "channel_max", readonly(channel_max))

    def __len__(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True)
class CorrespondenceSet:
    """Index pairs between two clouds plus their feature-space distances."""

    pairs: np.ndarray
    distances: np.ndarray
    source_size: int
    target_size: int

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        dists = as_float_array(self.distances, "distances").reshape(-1)
        if pairs.shape[0] != dists.shape[0]:
            raise ValueError("pairs and distances must have the same length")
        if pairs.size:
            if pairs.min() < 0:
                raise ValueError("pair indices must be non-negative")
            if pairs[:, 0].max() >= self.source_size or pairs[:, 1].max() >= self.target_size:
                raise ValueError("pair indices out of bounds for their clouds")
            if np.unique(pairs, axis=0).shape[0] != pairs.shape[0]:
                raise ValueError("duplicate correspondence pairs")
        object.__setattr__(self, "pairs", readonly(pairs))
        object.__setattr__(self, "distances", readonly(dists))

    def __len__(self) -> int:
        return self.pairs.shape[0]


def rotation_about_axis(axis: str, angle: float) -> np.ndarray:
    """Rotation matrix for an angle in radians about the 'x', 'y' or 'z' axis."""
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ValueError(f"unknown axis {axis!r}")


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Rigidly move a cloud: p -> R p + t. Attributes are copied unchanged."""
    moved = t.apply(cloud.points)
    return PointCloud(moved, dict(cloud.attributes))


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """Composition applying ``t2`` first, then ``t1``."""
    return RigidTransform(t1.rotation @ t2.rotation, t1.rotation @ t2.translation + t1.translation)
