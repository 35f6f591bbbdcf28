import numpy as np
import numpy.testing as npt
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import Pipeline

from kp3feat import PointCloud, rotation_about_axis, voxel_downsample
from kp3feat.estimators import (
    DenseFeatureExtractor,
    KeypointDetector,
    RigidRegistrar,
    UniformSampler,
    VoxelGridSampler,
)


@pytest.fixture(scope="module")
def cloud():
    return np.random.default_rng(0).uniform(0, 1, (300, 3))


class TestSklearnProtocol:
    @pytest.mark.parametrize(
        "estimator",
        [
            VoxelGridSampler(voxel_size=0.05),
            UniformSampler(rate=3),
            DenseFeatureExtractor(random_seed=1),
            KeypointDetector(num_keypoints=16),
            RigidRegistrar(max_iterations=50),
        ],
    )
    def test_get_params_and_clone(self, estimator):
        params = estimator.get_params()
        cloned = clone(estimator)
        assert cloned.get_params() == params

    def test_set_params(self):
        sampler = VoxelGridSampler().set_params(voxel_size=0.2)
        assert sampler.voxel_size == 0.2

    def test_not_fitted_errors(self, cloud):
        with pytest.raises(NotFittedError):
            DenseFeatureExtractor().transform(cloud)
        with pytest.raises(NotFittedError):
            KeypointDetector().predict(cloud)
        with pytest.raises(NotFittedError):
            RigidRegistrar().transform(cloud)


class TestSamplers:
    def test_voxel_matches_functional_api(self, cloud):
        got = VoxelGridSampler(voxel_size=0.1).fit(cloud).transform(cloud)
        expected = voxel_downsample(PointCloud(cloud), 0.1).points
        npt.assert_array_equal(got, expected)

    def test_uniform_keeps_every_nth(self, cloud):
        got = UniformSampler(rate=7).fit(cloud).transform(cloud)
        npt.assert_array_equal(got, cloud[::7])


class TestDenseFeatureExtractor:
    def test_transform_shape_and_norms(self, cloud):
        extractor = DenseFeatureExtractor(random_seed=0, base_grid=0.05).fit()
        descriptors = extractor.transform(cloud)
        assert descriptors.shape == (300, 32)
        norms = np.linalg.norm(descriptors, axis=1)
        npt.assert_allclose(norms[norms > 0], 1.0, atol=1e-6)

    def test_loads_saved_model(self, cloud, tmp_path):
        from kp3feat import KpConvModel, save_weights

        model = KpConvModel.random(3, base_grid=0.05)
        path = tmp_path / "m.kp3"
        save_weights(model, path)
        from_path = DenseFeatureExtractor(model_path=str(path)).fit().transform(cloud)
        fresh = DenseFeatureExtractor(random_seed=3, base_grid=0.05).fit().transform(cloud)
        npt.assert_array_equal(from_path, fresh)

    def test_composes_in_sklearn_pipeline(self, cloud):
        pipe = Pipeline([
            ("sample", VoxelGridSampler(voxel_size=0.08)),
            ("describe", DenseFeatureExtractor(random_seed=0, base_grid=0.05)),
        ])
        out = pipe.fit_transform(cloud)
        expected_n = voxel_downsample(PointCloud(cloud), 0.08).n
        assert out.shape == (expected_n, 32)


class TestKeypointDetector:
    def test_predict_returns_top_indices(self, cloud):
        detector = KeypointDetector(random_seed=0, base_grid=0.05, num_keypoints=20).fit()
        indices = detector.predict(cloud)
        assert indices.shape == (20,)
        scores = detector.score_samples(cloud)
        assert scores.shape == (300,)
        # predicted indices carry the highest scores
        threshold = np.sort(scores)[-20]
        assert np.all(scores[indices] >= threshold)

    def test_clamps_to_cloud_size(self, cloud):
        detector = KeypointDetector(random_seed=0, base_grid=0.05, num_keypoints=10_000).fit()
        assert detector.predict(cloud).shape == (300,)


class TestRigidRegistrar:
    def test_recovers_exact_pose(self):
        rng = np.random.default_rng(1)
        src = rng.uniform(-1, 1, (60, 3))
        rot = rotation_about_axis("z", 0.8) @ rotation_about_axis("x", -0.3)
        translation = np.array([0.4, -0.2, 1.0])
        dst = src @ rot.T + translation
        reg = RigidRegistrar(max_iterations=200, seed=0).fit(src, dst)
        assert reg.success_
        assert reg.inlier_mask_.all()
        npt.assert_allclose(reg.rotation_, rot, atol=1e-9)
        npt.assert_allclose(reg.translation_, translation, atol=1e-9)
        npt.assert_allclose(reg.transform(src), dst, atol=1e-9)

    def test_ignores_outliers(self):
        rng = np.random.default_rng(2)
        src = rng.uniform(-1, 1, (100, 3))
        dst = src + np.array([0.1, 0.0, 0.0])
        dst[:30] += rng.uniform(1, 2, (30, 3))  # corrupted correspondences
        reg = RigidRegistrar(max_iterations=500, inlier_threshold=0.05, seed=0).fit(src, dst)
        assert reg.inlier_mask_.sum() == 70
        npt.assert_allclose(reg.translation_, [0.1, 0.0, 0.0], atol=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            RigidRegistrar().fit(np.zeros((4, 3)), np.zeros((5, 3)))
