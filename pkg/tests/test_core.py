import numpy as np
import numpy.testing as npt
import pytest

from kp3feat import (
    PointCloud,
    RigidTransform,
    apply_transform,
    compose,
    rotation_about_axis,
)


def random_transform(rng):
    rot = (
        rotation_about_axis("z", rng.uniform(0, 2 * np.pi))
        @ rotation_about_axis("y", rng.uniform(0, 2 * np.pi))
        @ rotation_about_axis("x", rng.uniform(0, 2 * np.pi))
    )
    return RigidTransform(rot, rng.uniform(-2, 2, 3))


class TestPointCloud:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, 0.0, np.nan]]))
        with pytest.raises(ValueError):
            PointCloud(np.array([[np.inf, 0.0, 0.0]]))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            PointCloud(np.empty((0, 3)))

    def test_attribute_length_must_match(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((2, 3)), {"weight": np.zeros(3)})

    def test_immutable(self):
        cloud = PointCloud(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 1.0


class TestRigidTransform:
    def test_identity(self):
        t = RigidTransform.identity()
        npt.assert_array_equal(t.rotation, np.eye(3))
        npt.assert_array_equal(t.translation, np.zeros(3))

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_inverse_composes_to_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            t = random_transform(rng)
            both = compose(t, t.inverse())
            npt.assert_allclose(both.rotation, np.eye(3), atol=1e-9)
            npt.assert_allclose(both.translation, np.zeros(3), atol=1e-9)

    def test_matrix_round_trip(self):
        t = random_transform(np.random.default_rng(1))
        m = t.as_matrix()
        assert m.shape == (4, 4)
        npt.assert_array_equal(m[:3, :3], t.rotation)
        npt.assert_array_equal(m[3], [0, 0, 0, 1])


class TestApplyTransform:
    def test_identity_is_exact(self):
        cloud = PointCloud(np.random.default_rng(2).normal(size=(20, 3)))
        moved = apply_transform(cloud, RigidTransform.identity())
        npt.assert_array_equal(moved.points, cloud.points)

    def test_quarter_turn_about_z(self):
        cloud = PointCloud(np.array([[1.0, 0.0, 0.0]]))
        t = RigidTransform(rotation_about_axis("z", np.pi / 2), np.zeros(3))
        npt.assert_allclose(apply_transform(cloud, t).points, [[0.0, 1.0, 0.0]], atol=1e-12)

    def test_round_trip_through_inverse(self):
        rng = np.random.default_rng(3)
        cloud = PointCloud(rng.uniform(-1, 1, (10, 3)))
        t = random_transform(rng)
        back = apply_transform(apply_transform(cloud, t), t.inverse())
        npt.assert_allclose(back.points, cloud.points, atol=1e-9)

    def test_attributes_copied_unchanged(self):
        rng = np.random.default_rng(4)
        values = rng.uniform(size=5)
        cloud = PointCloud(rng.normal(size=(5, 3)), {"score": values})
        moved = apply_transform(cloud, random_transform(rng))
        npt.assert_array_equal(moved.attributes["score"], values)

    def test_preserves_pairwise_distances(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-1, 1, (30, 3))
        moved = apply_transform(PointCloud(pts), random_transform(rng)).points
        d_before = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d_after = np.linalg.norm(moved[:, None] - moved[None, :], axis=2)
        npt.assert_allclose(d_after, d_before, atol=1e-9)


class TestCompose:
    def test_identity_neutral(self):
        t = random_transform(np.random.default_rng(6))
        after = compose(t, RigidTransform.identity())
        npt.assert_array_equal(after.rotation, t.rotation)
        npt.assert_array_equal(after.translation, t.translation)

    def test_with_inverse_gives_identity(self):
        t = random_transform(np.random.default_rng(7))
        for c in (compose(t, t.inverse()), compose(t.inverse(), t)):
            npt.assert_allclose(c.rotation, np.eye(3), atol=1e-9)
            npt.assert_allclose(c.translation, np.zeros(3), atol=1e-9)

    def test_z_rotations_add(self):
        t30 = RigidTransform(rotation_about_axis("z", np.radians(30)), np.zeros(3))
        t60 = RigidTransform(rotation_about_axis("z", np.radians(60)), np.zeros(3))
        combined = compose(t30, t60)
        # oracle: the plain matrix product, and the closed-form 90 degree matrix
        npt.assert_array_equal(combined.rotation, t30.rotation @ t60.rotation)
        npt.assert_allclose(combined.rotation, rotation_about_axis("z", np.pi / 2), atol=1e-12)

    def test_matches_point_application_order(self):
        rng = np.random.default_rng(8)
        t1, t2 = random_transform(rng), random_transform(rng)
        p = rng.normal(size=(7, 3))
        via_compose = compose(t1, t2).apply(p)
        via_sequence = t1.apply(t2.apply(p))
        npt.assert_allclose(via_compose, via_sequence, atol=1e-12)

    def test_associative(self):
        rng = np.random.default_rng(9)
        a, b, c = (random_transform(rng) for _ in range(3))
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        npt.assert_allclose(left.rotation, right.rotation, atol=1e-9)
        npt.assert_allclose(left.translation, right.translation, atol=1e-9)
