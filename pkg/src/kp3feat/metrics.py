"""Evaluation formulas: inlier ratio, recalls, pose errors, repeatability.

All indicator thresholds are strict inequalities, matching the definitions
the numbers are reported under; boundary cases are pinned down in the tests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import CorrespondenceSet, PointCloud, RigidTransform, compose
from .validation import check_points, check_positive


@dataclass(frozen=True)
class PairEvaluation:
    """Per-pair evaluation record aggregated into benchmark reports."""

    pair_id: str
    scene: str = ""
    overlap: float = 1.0
    inlier_ratio: float = 0.0
    matched: bool = False
    rmse: float = np.inf
    rte: float = np.inf
    rre: float = np.inf
    repeatability: float = 0.0
    failure: str = ""

    def __post_init__(self):
        for name in ("overlap", "inlier_ratio", "repeatability"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if np.isfinite(self.rre) and not 0.0 <= self.rre <= 180.0:
            raise ValueError(f"rre must lie in [0, 180] degrees, got {self.rre}")


def inlier_ratio(matches: CorrespondenceSet, cloud_p: PointCloud, cloud_q: PointCloud,
                 t_gt: RigidTransform, tau1: float = 0.10) -> float:
    """Fraction of matches within ``tau1`` (strict) under the ground-truth pose."""
    tau1 = check_positive(tau1, "tau1")
    if len(matches) == 0:
        warnings.warn("empty match set; inlier ratio defined as 0", stacklevel=2)
        return 0.0
    p = cloud_p.points[matches.pairs[:, 0]]
    q = cloud_q.points[matches.pairs[:, 1]]
    residuals = np.linalg.norm(p - t_gt.apply(q), axis=1)
    return float(np.mean(residuals < tau1))


def feature_matching_recall(pair_evals, tau2: float = 0.05,
                            by_scene: bool = True) -> tuple[float, float]:
    """Fraction of pairs whose inlier ratio strictly exceeds ``tau2``.

    With ``by_scene`` (the reporting convention) the recall is the mean of
    scene-level recalls and the spread is their standard deviation; otherwise
    both are taken over the flat pair list. Callers are expected to pass only
    pairs from the evaluation set (overlap above 30%).
    """
    evals = list(pair_evals)
    if not evals:
        raise ValueError("no pair evaluations given")
    hits = np.array([pe.inlier_ratio > tau2 for pe in evals], dtype=np.float64)
    if not by_scene:
        return float(hits.mean()), float(hits.std())
    scenes: dict[str, list[float]] = {}
    for pe, hit in zip(evals, hits):
        scenes.setdefault(pe.scene, []).append(hit)
    recalls = np.array([np.mean(v) for _, v in sorted(scenes.items())])
    return float(recalls.mean()), float(recalls.std())


def rmse_over_correspondences(p_star, q_star, t_est: RigidTransform) -> float:
    """Root-mean-square residual of ground-truth correspondences under a pose."""
    p = check_points(p_star, "p_star")
    q = check_points(q_star, "q_star")
    if p.shape != q.shape:
        raise ValueError("ground-truth correspondences must pair up one to one")
    residuals = p - t_est.apply(q)
    return float(np.sqrt(np.mean(np.sum(residuals * residuals, axis=1))))


def registration_recall(gt_correspondences, estimates, rmse_threshold: float = 0.2) -> float:
    """Fraction of pairs whose correspondence RMSE is strictly below the threshold.

    ``gt_correspondences`` is a sequence of (p_star, q_star) arrays and
    ``estimates`` the matching estimated transforms.
    """
    rmse_threshold = check_positive(rmse_threshold, "rmse_threshold")
    gt = list(gt_correspondences)
    est = list(estimates)
    if not gt or len(gt) != len(est):
        raise ValueError("one estimate per ground-truth correspondence set required")
    hits = [rmse_over_correspondences(p, q, t) < rmse_threshold for (p, q), t in zip(gt, est)]
    return float(np.mean(hits))


def rte_rre(t_est: RigidTransform, t_gt: RigidTransform) -> tuple[float, float]:
    """Relative translation error (meters) and rotation error (degrees).

    Both read off the error transform inv(T_gt) * T_est; the rotation error is
    the angle of its rotation part.
    """
    if np.array_equal(t_est.rotation, t_gt.rotation) and np.array_equal(
        t_est.translation, t_gt.translation
    ):
        return 0.0, 0.0  # identical poses have zero error by definition
    delta = compose(t_gt.inverse(), t_est)
    rte = float(np.linalg.norm(delta.translation))
    cos_angle = np.clip((np.trace(delta.rotation) - 1.0) / 2.0, -1.0, 1.0)
    rre = float(np.degrees(np.arccos(cos_angle)))
    return rte, rre


def success_rate(errors, rte_max: float = 2.0, rre_max: float = 5.0) -> float:
    """Fraction of (rte, rre) pairs with rte < rte_max and rre < rre_max."""
    errors = list(errors)
    if not errors:
        raise ValueError("no pose errors given")
    hits = [(rte < rte_max) and (rre < rre_max) for rte, rre in errors]
    return float(np.mean(hits))


def _keypoint_coordinates(cloud: PointCloud, keypoints) -> np.ndarray:
    indices = getattr(keypoints, "indices", keypoints)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size == 0:
        raise ValueError("empty keypoint set")
    return cloud.points[indices]


def relative_repeatability(kp_p, kp_q, cloud_p: PointCloud, cloud_q: PointCloud,
                           t_gt: RigidTransform, threshold: float,
                           symmetric: bool = False) -> float:
    """Fraction of P-keypoints with a Q-keypoint within ``threshold`` (strict)
    once the Q-keypoints are moved into P's frame by the ground-truth pose.

    The measure is one-directional; ``symmetric`` averages both directions.
    """
    threshold = check_positive(threshold, "threshold")
    p = _keypoint_coordinates(cloud_p, kp_p)
    q = t_gt.apply(_keypoint_coordinates(cloud_q, kp_q))
    d_pq, _ = cKDTree(q).query(p)
    forward = float(np.mean(d_pq < threshold))
    if not symmetric:
        return forward
    d_qp, _ = cKDTree(p).query(q)
    backward = float(np.mean(d_qp < threshold))
    return 0.5 * (forward + backward)
