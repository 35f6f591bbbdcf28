import numpy as np
import pytest

from kp3feat import KpConvModel
from kp3feat.config import profile_config
from kp3feat.io import load_manifest
from kp3feat.pipeline import run_pipeline

from synthetic import make_dataset


@pytest.fixture(scope="module")
def small_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    manifest_path, poses_path = make_dataset(root, n_pairs=2, seed=0)
    manifest = load_manifest(manifest_path, poses_path)
    model = KpConvModel.random(0, base_grid=0.03)
    config = profile_config(
        "indoor",
        ransac_iterations=400,
        keypoint_counts=(400, 100),
        repeatability_counts=(4, 16, 64),
        seed=5,
    )
    return config, manifest, model


class TestRunPipeline:
    def test_translation_pairs_register_perfectly(self, small_setup):
        config, manifest, model = small_setup
        report = run_pipeline(config, manifest, model, mode="pred")
        assert not report.failures
        row = report.summary[0]
        assert row.n_pairs == 2
        assert row.success_rate == 1.0
        assert row.fmr == 1.0
        assert row.registration_recall == 1.0
        assert row.mean_rte < 1e-3
        assert row.mean_repeatability > 0.0
        assert all(r.mean_repeatability > 0.0 for r in report.repeatability_sweep)

    def test_rand_and_pred_reports_share_schema(self, small_setup):
        config, manifest, model = small_setup
        pred = run_pipeline(config, manifest, model, mode="pred")
        rand = run_pipeline(config, manifest, model, mode="rand")
        assert [r.requested_keypoints for r in pred.summary] == [
            r.requested_keypoints for r in rand.summary
        ]
        assert [r.keypoints for r in pred.repeatability_sweep] == [
            r.keypoints for r in rand.repeatability_sweep
        ]
        assert pred.to_csv().splitlines()[1] == rand.to_csv().splitlines()[1]

    def test_sweep_produces_one_row_per_count(self, small_setup):
        config, manifest, model = small_setup
        report = run_pipeline(config, manifest, model, num_keypoints=(300, 200, 100))
        assert [r.requested_keypoints for r in report.summary] == [300, 200, 100]

    def test_single_count_accepted(self, small_setup):
        config, manifest, model = small_setup
        report = run_pipeline(config, manifest, model, num_keypoints=150)
        assert [r.requested_keypoints for r in report.summary] == [150]

    def test_byte_identical_reruns(self, small_setup):
        config, manifest, model = small_setup
        a = run_pipeline(config, manifest, model, mode="rand")
        b = run_pipeline(config, manifest, model, mode="rand")
        assert a.to_csv() == b.to_csv()

    def test_failures_isolated(self, small_setup, tmp_path):
        config, manifest, model = small_setup
        # one entry pointing at a missing file must not sink the others
        from kp3feat.io import PairEntry, PairManifest

        broken = PairEntry(
            scene="broken",
            path_a=tmp_path / "missing_a.ply",
            path_b=tmp_path / "missing_b.ply",
            overlap=1.0,
            transform=manifest.entries[0].transform,
        )
        patched = PairManifest(tuple(manifest.entries) + (broken,))
        report = run_pipeline(config, patched, model, num_keypoints=100)
        assert len(report.failures) == 1
        assert "broken" in report.failures[0]
        assert report.summary[0].n_pairs == 2

    def test_bad_mode_rejected(self, small_setup):
        config, manifest, model = small_setup
        with pytest.raises(ValueError):
            run_pipeline(config, manifest, model, mode="best")


class TestReportRendering:
    def test_csv_contains_sweep_rows(self, small_setup):
        config, manifest, model = small_setup
        report = run_pipeline(config, manifest, model, num_keypoints=100)
        csv = report.to_csv()
        for count in (4, 16, 64):
            assert f"\n{count}," in csv
        assert csv.startswith("# mode=pred")

    def test_table_renders(self, small_setup):
        config, manifest, model = small_setup
        report = run_pipeline(config, manifest, model, num_keypoints=100)
        table = report.to_table()
        assert "FMR" in table and "repeatability sweep" in table
