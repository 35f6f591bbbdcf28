"""Feature matching and rigid alignment: mutual NN, Kabsch, RANSAC, ICP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import CorrespondenceSet, PointCloud, RigidTransform
from .validation import check_index_array, check_points, check_positive


class DegenerateGeometryError(ValueError):
    """Point configuration does not determine a unique rigid transform."""


@dataclass(frozen=True)
class RegistrationResult:
    """Outcome of a robust alignment.

    ``success`` is False when no hypothesis reached ``sample_size`` inliers;
    the transform is then the identity and the inlier set empty. When
    successful, every inlier pair satisfies ||p_i - T(q_j)|| <= threshold
    under the returned transform.
    """

    transform: RigidTransform
    inlier_pairs: CorrespondenceSet
    iterations_used: int
    inlier_distance_threshold: float
    success: bool
    inlier_rmse: float


def _descriptor_matrix(features) -> np.ndarray:
    desc = getattr(features, "descriptors", features)
    desc = np.asarray(desc, dtype=np.float64)
    if desc.ndim != 2:
        raise ValueError("descriptors must form an (N, c) matrix")
    return desc


def _nearest_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Index into ``b`` of each ``a`` row's Euclidean nearest neighbor."""
    bb = np.einsum("ij,ij->i", b, b)
    out = np.empty(a.shape[0], dtype=np.int64)
    chunk = max(1, 4_000_000 // max(b.shape[0], 1))
    for start in range(0, a.shape[0], chunk):
        rows = a[start : start + chunk]
        d2 = np.einsum("ij,ij->i", rows, rows)[:, None] + bb[None, :] - 2.0 * (rows @ b.T)
        out[start : start + chunk] = np.argmin(d2, axis=1)
    return out


def mutual_nn_matches(feat_p, feat_q, sel_p=None, sel_q=None) -> CorrespondenceSet:
    """Correspondences that are nearest neighbors of each other in feature space.

    ``sel_p``/``sel_q`` restrict the search to selected point indices (for
    example detected keypoints); they default to all points. Nearest-neighbor
    ties resolve to the lower cloud index. Reported distances are the
    descriptor-space Euclidean distances of the retained pairs.
    """
    desc_p = _descriptor_matrix(feat_p)
    desc_q = _descriptor_matrix(feat_q)
    sel_p = np.arange(desc_p.shape[0]) if sel_p is None else check_index_array(sel_p, desc_p.shape[0], "sel_p")
    sel_q = np.arange(desc_q.shape[0]) if sel_q is None else check_index_array(sel_q, desc_q.shape[0], "sel_q")
    if sel_p.size == 0 or sel_q.size == 0:
        raise ValueError("selections must be non-empty")
    if np.unique(sel_p).size != sel_p.size or np.unique(sel_q).size != sel_q.size:
        raise ValueError("selections must not repeat indices")
    sel_p = np.sort(sel_p)  # ascending order makes argmin ties pick the lower index
    sel_q = np.sort(sel_q)

    a = desc_p[sel_p]
    b = desc_q[sel_q]
    nn_pq = _nearest_rows(a, b)
    nn_qp = _nearest_rows(b, a)
    i = np.arange(sel_p.size)
    mutual = nn_qp[nn_pq] == i
    pairs = np.stack([sel_p[i[mutual]], sel_q[nn_pq[mutual]]], axis=1)
    dists = np.linalg.norm(desc_p[pairs[:, 0]] - desc_q[pairs[:, 1]], axis=1)
    return CorrespondenceSet(pairs, dists, desc_p.shape[0], desc_q.shape[0])


def _collinear(points: np.ndarray) -> bool:
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s[1] <= 1e-9 * max(s[0], 1e-30)


def estimate_rigid(src_points, dst_points) -> RigidTransform:
    """Least-squares rigid fit: the transform T minimizing sum ||dst - T(src)||^2.

    Uses the SVD of the cross-covariance with a reflection correction, so the
    returned rotation always has determinant +1.
    """
    src = check_points(src_points, "src_points")
    dst = check_points(dst_points, "dst_points")
    if src.shape != dst.shape:
        raise ValueError("source and destination must pair up one to one")
    if src.shape[0] < 3:
        raise ValueError("at least 3 point pairs are required")
    if _collinear(src) or _collinear(dst):
        raise DegenerateGeometryError("collinear points do not pin down the rotation")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    rot = v @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, cd - rot @ cs)


def _fit_rigid_batch(src: np.ndarray, dst: np.ndarray):
    """Kabsch on a batch of minimal samples; returns (R, t, valid).

    Samples whose source or destination points are nearly collinear are
    flagged invalid instead of raising.
    """
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    src_c = src - cs
    dst_c = dst - cd
    h = np.einsum("mij,mik->mjk", src_c, dst_c)
    u, _, vt = np.linalg.svd(h)
    v = vt.transpose(0, 2, 1)
    det = np.linalg.det(v @ u.transpose(0, 2, 1))
    diag = np.zeros_like(h)
    diag[:, 0, 0] = 1.0
    diag[:, 1, 1] = 1.0
    diag[:, 2, 2] = np.sign(det)
    rot = v @ diag @ u.transpose(0, 2, 1)
    t = cd[:, 0, :] - np.einsum("mij,mj->mi", rot, cs[:, 0, :])

    def area(x):
        return np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1)

    if src.shape[1] == 3:
        valid = (area(src) > 1e-12) & (area(dst) > 1e-12)
    else:
        s_src = np.linalg.svd(src_c, compute_uv=False)
        s_dst = np.linalg.svd(dst_c, compute_uv=False)
        valid = (s_src[:, 1] > 1e-9 * np.maximum(s_src[:, 0], 1e-30)) & (
            s_dst[:, 1] > 1e-9 * np.maximum(s_dst[:, 0], 1e-30)
        )
    return rot, t, valid


def _draw_samples(rng: np.random.Generator, m: int, size: int, count: int) -> np.ndarray:
    """(count, size) index samples without replacement within each row."""
    samples = rng.integers(0, m, size=(count, size))
    while True:
        dup = np.zeros(count, dtype=bool)
        for a in range(size):
            for b in range(a + 1, size):
                dup |= samples[:, a] == samples[:, b]
        if not dup.any():
            return samples
        samples[dup] = rng.integers(0, m, size=(int(dup.sum()), size))


def ransac_register(cloud_p: PointCloud, cloud_q: PointCloud, matches: CorrespondenceSet,
                    max_iters: int = 50_000, inlier_threshold: float = 0.10,
                    sample_size: int = 3, seed=0, adaptive: bool = False,
                    confidence: float = 0.999) -> RegistrationResult:
    """Robust rigid alignment of cloud Q onto cloud P from putative matches.

    Draws seeded minimal samples, keeps the hypothesis with the most inliers
    (ties: lower inlier RMSE, then earlier hypothesis), and refits it on its
    inlier set. By default all ``max_iters`` hypotheses are evaluated; with
    ``adaptive`` the loop stops once the best inlier ratio makes a better
    sample unlikely at the given ``confidence``.
    """
    inlier_threshold = check_positive(inlier_threshold, "inlier_threshold")
    sample_size = int(sample_size)
    if sample_size < 3:
        raise ValueError("sample_size must be at least 3")
    if len(matches) < sample_size:
        raise ValueError(f"need at least {sample_size} matches, got {len(matches)}")
    max_iters = int(max_iters)
    if max_iters < 1:
        raise ValueError("max_iters must be positive")

    pairs = matches.pairs
    dst = cloud_p.points[pairs[:, 0]]  # transform maps Q into P's frame
    src = cloud_q.points[pairs[:, 1]]
    m = len(matches)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    best_count = 0
    best_rmse = np.inf
    best_rot = np.eye(3)
    best_t = np.zeros(3)
    executed = 0
    needed = max_iters
    block_size = 64 if adaptive else 1024  # small blocks let the adaptive stop engage

    while executed < min(max_iters, needed):
        block = min(block_size, min(max_iters, needed) - executed)
        samples = _draw_samples(rng, m, sample_size, block)
        rot, t, valid = _fit_rigid_batch(src[samples], dst[samples])

        # Residuals of all matches against each hypothesis, chunked.
        for h0 in range(0, block, 256):
            h1 = min(block, h0 + 256)
            moved = np.einsum("hij,nj->hni", rot[h0:h1], src) + t[h0:h1][:, None, :]
            d = np.linalg.norm(moved - dst[None, :, :], axis=2)
            inl = d <= inlier_threshold
            counts = np.where(valid[h0:h1], inl.sum(axis=1), -1)
            for h in np.nonzero(counts >= max(best_count, sample_size))[0]:
                cnt = int(counts[h])
                rmse = float(np.sqrt(np.mean(d[h][inl[h]] ** 2)))
                if cnt > best_count or (cnt == best_count and rmse < best_rmse):
                    best_count, best_rmse = cnt, rmse
                    best_rot, best_t = rot[h0 + h], t[h0 + h]
        executed += block

        if adaptive and best_count >= sample_size:
            w = best_count / m
            miss = max(1e-12, min(1.0 - 1e-12, 1.0 - w**sample_size))
            needed = int(np.ceil(np.log(1.0 - confidence) / np.log(miss)))

    if best_count < sample_size:
        empty = CorrespondenceSet(np.empty((0, 2), np.int64), np.empty(0), cloud_p.n, cloud_q.n)
        return RegistrationResult(RigidTransform.identity(), empty, executed,
                                  inlier_threshold, False, np.inf)

    transform = RigidTransform(best_rot, best_t)
    residuals = np.linalg.norm(dst - transform.apply(src), axis=1)
    inlier_mask = residuals <= inlier_threshold
    try:
        refit = estimate_rigid(src[inlier_mask], dst[inlier_mask])
        refit_res = np.linalg.norm(dst - refit.apply(src), axis=1)
        refit_mask = refit_res <= inlier_threshold
        if refit_mask.sum() >= inlier_mask.sum():
            transform, residuals, inlier_mask = refit, refit_res, refit_mask
    except (DegenerateGeometryError, ValueError):
        pass  # keep the raw hypothesis if the refit is degenerate

    inliers = CorrespondenceSet(pairs[inlier_mask], matches.distances[inlier_mask],
                                matches.source_size, matches.target_size)
    rmse = float(np.sqrt(np.mean(residuals[inlier_mask] ** 2)))
    return RegistrationResult(transform, inliers, executed, inlier_threshold, True, rmse)


def icp_refine(cloud_p: PointCloud, cloud_q: PointCloud, initial: RigidTransform,
               max_iters: int = 50, convergence_eps: float = 1e-8) -> RigidTransform:
    """Point-to-point ICP of cloud Q onto cloud P from an initial transform.

    Alternates nearest-neighbor association with a full rigid refit. The mean
    association distance never increases: an update that would is discarded
    and the previous transform returned.
    """
    max_iters = int(max_iters)
    if max_iters < 1:
        raise ValueError("max_iters must be positive")
    tree = cKDTree(cloud_p.points)
    current = initial
    previous = initial
    prev_mean = np.inf

    for _ in range(max_iters):
        moved = current.apply(cloud_q.points)
        dists, assoc = tree.query(moved)
        mean_dist = float(np.mean(dists))
        if mean_dist > prev_mean:
            return previous
        prev_mean = mean_dist
        try:
            refit = estimate_rigid(cloud_q.points, cloud_p.points[assoc])
        except DegenerateGeometryError:
            return current
        delta = max(
            float(np.max(np.abs(refit.rotation - current.rotation))),
            float(np.max(np.abs(refit.translation - current.translation))),
        )
        previous, current = current, refit
        if delta < convergence_eps:
            return current
    return current
