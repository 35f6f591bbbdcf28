import numpy as np
import numpy.testing as npt
import pytest

from kp3feat import PointCloud, apply_transform
from kp3feat.cli import main, read_keypoints_csv
from kp3feat.io import load_manifest, read_features, read_ply, read_pose_file, write_ply

from synthetic import make_dataset, make_fragment


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_dataset")
    manifest_path, poses_path = make_dataset(root, n_pairs=2, seed=1)
    return root, manifest_path, poses_path


MODEL_ARGS = ["--random-seed", "0", "--base-grid", "0.03"]


class TestDescribeDetect:
    def test_describe_writes_features(self, dataset, tmp_path):
        root, _, _ = dataset
        out = tmp_path / "a.k3ft"
        sampled = tmp_path / "a_sampled.ply"
        code = main([
            "describe", str(root / "frag_000_a.ply"), *MODEL_ARGS,
            "--voxel", "0.03", "--out", str(out), "--sampled-cloud", str(sampled),
        ])
        assert code == 0
        features = read_features(out)
        cloud = read_ply(sampled)
        assert features.n == cloud.n
        assert features.channels == 32

    def test_detect_writes_sorted_scores(self, dataset, tmp_path):
        root, _, _ = dataset
        out = tmp_path / "kp.csv"
        scores = tmp_path / "scores.csv"
        code = main([
            "detect", str(root / "frag_000_a.ply"), *MODEL_ARGS,
            "--voxel", "0.03", "--num-keypoints", "32",
            "--out", str(out), "--scores-csv", str(scores),
        ])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "index,score"
        assert len(lines) == 33
        values = [float(l.split(",")[1]) for l in lines[1:]]
        assert all(b <= a for a, b in zip(values, values[1:]))
        assert len(scores.read_text().splitlines()) > 33


class TestMatchRegister:
    def make_pair_features(self, dataset, tmp_path):
        root, _, poses_path = dataset
        paths = {}
        for name in ("frag_000_a", "frag_000_b"):
            out = tmp_path / f"{name}.k3ft"
            sampled = tmp_path / f"{name}_s.ply"
            main([
                "describe", str(root / f"{name}.ply"), *MODEL_ARGS,
                "--voxel", "0.03", "--out", str(out), "--sampled-cloud", str(sampled),
            ])
            paths[name] = (out, sampled)
        return paths, poses_path

    def test_match_and_register_recover_pose(self, dataset, tmp_path):
        paths, poses_path = self.make_pair_features(dataset, tmp_path)
        feat_a, cloud_a = paths["frag_000_a"]
        feat_b, cloud_b = paths["frag_000_b"]

        matches_csv = tmp_path / "matches.csv"
        assert main([
            "match", "--features-a", str(feat_a), "--features-b", str(feat_b),
            "--out", str(matches_csv),
        ]) == 0
        lines = matches_csv.read_text().splitlines()
        assert lines[0] == "index_a,index_b,distance"
        assert len(lines) > 10

        pose_out = tmp_path / "pose.txt"
        assert main([
            "register", "--cloud-a", str(cloud_a), "--cloud-b", str(cloud_b),
            "--features-a", str(feat_a), "--features-b", str(feat_b),
            "--iterations", "300", "--seed", "0", "--out", str(pose_out),
            "--inliers-csv", str(tmp_path / "inl.csv"),
        ]) == 0
        estimated = read_pose_file(pose_out)[0][1]
        expected = read_pose_file(poses_path)[0][1]
        npt.assert_allclose(estimated.rotation, expected.rotation, atol=1e-6)
        npt.assert_allclose(estimated.translation, expected.translation, atol=1e-6)

    def test_register_failure_exit_code(self, dataset, tmp_path):
        paths, _ = self.make_pair_features(dataset, tmp_path)
        feat_a, cloud_a = paths["frag_000_a"]
        rng = np.random.default_rng(3)
        other = PointCloud(rng.uniform(0, 1, (read_features(feat_a).n, 3)))
        other_ply = tmp_path / "other.ply"
        write_ply(other_ply, other)
        code = main([
            "register", "--cloud-a", str(cloud_a), "--cloud-b", str(other_ply),
            "--features-a", str(feat_a), "--features-b", str(feat_a),
            "--iterations", "50", "--threshold", "1e-9",
            "--out", str(tmp_path / "pose.txt"),
        ])
        assert code == 1


class TestEvaluate:
    def test_evaluate_writes_report(self, dataset, tmp_path, capsys):
        _, manifest_path, poses_path = dataset
        out = tmp_path / "report.csv"
        code = main([
            "evaluate", "--manifest", str(manifest_path), "--poses", str(poses_path),
            *MODEL_ARGS, "--mode", "pred",
            "--ransac-iterations", "300",
            "--keypoint-counts", "200,100", "--repeatability-counts", "4,16",
            "--seed", "2", "--out", str(out),
        ])
        assert code == 0
        text = out.read_text()
        assert text.startswith("# mode=pred")
        assert "\n200," in text and "\n100," in text
        assert "FMR" in capsys.readouterr().out

    def test_byte_identical_reruns(self, dataset, tmp_path):
        _, manifest_path, poses_path = dataset
        outs = []
        for name in ("r1.csv", "r2.csv"):
            out = tmp_path / name
            main([
                "evaluate", "--manifest", str(manifest_path), "--poses", str(poses_path),
                *MODEL_ARGS, "--mode", "rand",
                "--ransac-iterations", "200", "--keypoint-counts", "150",
                "--repeatability-counts", "4,8", "--seed", "3", "--out", str(out),
            ])
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestPerturb:
    def test_rotated_set_consistent(self, dataset, tmp_path):
        root, manifest_path, poses_path = dataset
        out_dir = tmp_path / "rotated"
        assert main([
            "perturb", "--manifest", str(manifest_path), "--poses", str(poses_path),
            "--seed", "9", "--out-dir", str(out_dir),
        ]) == 0

        applied = dict(read_pose_file(out_dir / "applied_rotations.txt"))
        rotated_manifest = load_manifest(out_dir / "manifest.txt", out_dir / "poses.txt")
        for entry in rotated_manifest.entries:
            # rotations are pure (no translation), angles drawn per axis
            t = applied[(entry.path_a.stem,)]
            npt.assert_array_equal(t.translation, np.zeros(3))
            # rotated fragment = rotation applied to the original
            original = read_ply(root / entry.path_a.name)
            rotated = read_ply(entry.path_a)
            npt.assert_allclose(apply_transform(original, t).points, rotated.points, atol=1e-9)
            # new ground truth still maps rotated B onto rotated A
            original_b = read_ply(root / entry.path_b.name)
            rotated_b = read_ply(entry.path_b)
            moved = entry.transform.apply(rotated_b.points)
            old_entry = next(
                e for e in load_manifest(manifest_path, poses_path).entries
                if e.path_a.name == entry.path_a.name
            )
            expected = apply_transform(
                PointCloud(old_entry.transform.apply(original_b.points)), t
            ).points
            npt.assert_allclose(moved, expected, atol=1e-9)

    def test_same_seed_reproduces(self, dataset, tmp_path):
        _, manifest_path, poses_path = dataset
        dirs = []
        for name in ("p1", "p2"):
            out_dir = tmp_path / name
            main([
                "perturb", "--manifest", str(manifest_path), "--poses", str(poses_path),
                "--seed", "4", "--out-dir", str(out_dir),
            ])
            dirs.append(out_dir)
        a = (dirs[0] / "poses.txt").read_bytes()
        b = (dirs[1] / "poses.txt").read_bytes()
        assert a == b


class TestConvertPoses:
    def test_normalizes_log(self, dataset, tmp_path):
        # trajectory-log style block: ids plus a slightly noisy rotation
        log = tmp_path / "gt.log"
        log.write_text(
            "0 1 52\n"
            "1.00000002 0 0 0.5\n"
            "0 1 0 -0.25\n"
            "0 0 0.99999995 0\n"
            "0 0 0 1\n"
        )
        out = tmp_path / "poses.txt"
        assert main(["convert-poses", "--log", str(log), "--out", str(out)]) == 0
        key, transform = read_pose_file(out)[0]
        assert key == ("0", "1", "52")
        npt.assert_allclose(transform.rotation, np.eye(3), atol=1e-6)
        npt.assert_array_equal(transform.translation, [0.5, -0.25, 0.0])


def test_keypoints_csv_round_trip(tmp_path):
    from kp3feat.cli import write_keypoints_csv
    from kp3feat.detector import KeypointSet

    ks = KeypointSet(np.array([5, 2, 9]), np.array([0.9, 0.5, 0.1]))
    path = tmp_path / "kp.csv"
    write_keypoints_csv(path, ks)
    npt.assert_array_equal(read_keypoints_csv(path), [5, 2, 9])
