import pytest

from kp3feat.config import (
    DEFAULT_KEYPOINT_COUNTS,
    DEFAULT_REPEATABILITY_COUNTS,
    DatasetConfig,
    profile_config,
    read_config,
    write_config,
)


class TestProfiles:
    def test_indoor_defaults(self):
        c = profile_config("indoor")
        assert c.voxel_size == 0.03
        assert c.tau1 == 0.10
        assert c.tau2 == 0.05
        assert c.ransac_iterations == 50_000
        assert c.repeatability_threshold == 0.10

    def test_outdoor_defaults(self):
        c = profile_config("outdoor")
        assert c.voxel_size == 0.30
        assert c.rte_max == 2.0
        assert c.rre_max == 5.0
        assert c.repeatability_threshold == 0.50

    def test_sweep_defaults_match_reporting_convention(self):
        assert DEFAULT_KEYPOINT_COUNTS == (5000, 2500, 1000, 500, 250)
        assert DEFAULT_REPEATABILITY_COUNTS == (4, 8, 16, 32, 64, 128, 256, 512)

    def test_unknown_profile(self):
        with pytest.raises(ValueError):
            profile_config("underwater")

    def test_overrides(self):
        c = profile_config("indoor", voxel_size=0.05, seed=7)
        assert c.voxel_size == 0.05
        assert c.seed == 7
        assert c.tau1 == 0.10


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "run.cfg"
        original = profile_config("outdoor", seed=3, keypoint_counts=(100, 50))
        write_config(path, original)
        assert read_config(path) == original

    def test_parse_overrides_and_comments(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# evaluation setup\n"
            "profile = indoor\n"
            "voxel_size = 0.05   # coarser sampling\n"
            "keypoint_counts = 500,250\n"
            "seed = 11\n"
        )
        c = read_config(path)
        assert c.voxel_size == 0.05
        assert c.keypoint_counts == (500, 250)
        assert c.seed == 11
        assert c.tau2 == 0.05

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("banana = 3\n")
        with pytest.raises(ValueError):
            read_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("voxel_size = tiny\n")
        with pytest.raises(ValueError):
            read_config(path)

    def test_validation(self):
        with pytest.raises(ValueError):
            DatasetConfig(voxel_size=-1.0)
        with pytest.raises(ValueError):
            DatasetConfig(keypoint_counts=(0,))
