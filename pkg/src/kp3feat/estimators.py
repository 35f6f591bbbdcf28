"""Scikit-learn style wrappers so the pipeline stages compose with the wider
ecosystem (Pipeline, clone, get_params/set_params).

All estimators take and return plain (N, 3) or (N, c) float arrays; the
functional API underneath works with the richer domain types.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import PointCloud, RigidTransform
from .detector import score_cloud, select_keypoints
from .neighbors import build_index, radius_neighbors, uniform_downsample, voxel_downsample
from .network import KpConvModel, load_weights, network_forward
from .registration import CorrespondenceSet, ransac_register
from .validation import check_points


class VoxelGridSampler(TransformerMixin, BaseEstimator):
    """Transformer reducing a cloud to one barycenter per occupied voxel."""

    def __init__(self, voxel_size=0.03):
        self.voxel_size = voxel_size

    def fit(self, X, y=None):
        check_points(X)
        return self

    def transform(self, X):
        return voxel_downsample(PointCloud(check_points(X)), self.voxel_size).points


class UniformSampler(TransformerMixin, BaseEstimator):
    """Transformer keeping every ``rate``-th point."""

    def __init__(self, rate=15):
        self.rate = rate

    def fit(self, X, y=None):
        check_points(X)
        return self

    def transform(self, X):
        return uniform_downsample(PointCloud(check_points(X)), self.rate).points


class DenseFeatureExtractor(TransformerMixin, BaseEstimator):
    """Transformer turning an (N, 3) cloud into an (N, 32) descriptor matrix.

    The network comes from ``model_path`` when given, otherwise a random
    seeded model is built at fit time (useful for plumbing and tests).
    """

    def __init__(self, model_path=None, random_seed=0, base_grid=0.03):
        self.model_path = model_path
        self.random_seed = random_seed
        self.base_grid = base_grid

    def fit(self, X=None, y=None):
        if self.model_path is not None:
            self.model_ = load_weights(self.model_path)
        else:
            self.model_ = KpConvModel.random(self.random_seed, base_grid=self.base_grid)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.describe(X).descriptors

    def describe(self, X):
        """Full feature map (responses and descriptors) for a cloud."""
        check_is_fitted(self, "model_")
        return network_forward(self.model_, PointCloud(check_points(X)))


class KeypointDetector(BaseEstimator):
    """Detector scoring every point and predicting the top-k indices."""

    def __init__(self, model_path=None, random_seed=0, base_grid=0.03,
                 num_keypoints=512, detection_radius=None):
        self.model_path = model_path
        self.random_seed = random_seed
        self.base_grid = base_grid
        self.num_keypoints = num_keypoints
        self.detection_radius = detection_radius

    def fit(self, X=None, y=None):
        extractor = DenseFeatureExtractor(
            model_path=self.model_path,
            random_seed=self.random_seed,
            base_grid=self.base_grid,
        ).fit()
        self.extractor_ = extractor
        self.model_ = extractor.model_
        return self

    def score_samples(self, X):
        """Detection score for every point of the cloud."""
        check_is_fitted(self, "model_")
        cloud = PointCloud(check_points(X))
        features = network_forward(self.model_, cloud)
        radius = self.detection_radius or self.model_.first_radius
        neighbors = radius_neighbors(build_index(cloud), cloud, radius)
        return score_cloud(features, neighbors).scores

    def predict(self, X):
        """Indices of the top-scoring points, score descending."""
        check_is_fitted(self, "model_")
        cloud = PointCloud(check_points(X))
        features = network_forward(self.model_, cloud)
        radius = self.detection_radius or self.model_.first_radius
        neighbors = radius_neighbors(build_index(cloud), cloud, radius)
        scores = score_cloud(features, neighbors)
        k = min(int(self.num_keypoints), cloud.n)
        return select_keypoints(scores, k).indices


class RigidRegistrar(BaseEstimator):
    """RANSAC rigid alignment fit on corresponded points.

    ``fit(X, y)`` estimates the pose mapping source points ``X`` onto their
    corresponding target points ``y``; ``transform`` then applies it to any
    cloud. Fitted attributes: ``rotation_``, ``translation_``, ``inlier_mask_``.
    """

    def __init__(self, inlier_threshold=0.10, max_iterations=50_000, sample_size=3,
                 seed=0, adaptive=False):
        self.inlier_threshold = inlier_threshold
        self.max_iterations = max_iterations
        self.sample_size = sample_size
        self.seed = seed
        self.adaptive = adaptive

    def fit(self, X, y):
        src = check_points(X, "X")
        dst = check_points(y, "y")
        if src.shape != dst.shape:
            raise ValueError("X and y must contain the same number of points")
        n = src.shape[0]
        pairs = np.stack([np.arange(n)] * 2, axis=1)
        matches = CorrespondenceSet(pairs, np.zeros(n), n, n)
        result = ransac_register(
            PointCloud(dst),
            PointCloud(src),
            matches,
            max_iters=self.max_iterations,
            inlier_threshold=self.inlier_threshold,
            sample_size=self.sample_size,
            seed=self.seed,
            adaptive=self.adaptive,
        )
        self.success_ = result.success
        self.rotation_ = result.transform.rotation
        self.translation_ = result.transform.translation
        mask = np.zeros(n, dtype=bool)
        mask[result.inlier_pairs.pairs[:, 1]] = True
        self.inlier_mask_ = mask
        self.iterations_ = result.iterations_used
        return self

    def transform(self, X):
        check_is_fitted(self, "rotation_")
        return self.estimated_transform_.apply(check_points(X, "X"))

    @property
    def estimated_transform_(self) -> RigidTransform:
        check_is_fitted(self, "rotation_")
        return RigidTransform(self.rotation_, self.translation_)
