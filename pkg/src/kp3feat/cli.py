"""Command-line interface: describe, detect, match, register, evaluate, perturb."""

from __future__ import annotations

import argparse
import sys
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import profile_config, read_config
from .core import PointCloud, compose
from .detector import KeypointSet, score_cloud, select_keypoints
from .io import (
    load_manifest,
    read_features,
    read_ply,
    read_pose_file,
    write_features,
    write_ply,
    write_pose_file,
)
from .neighbors import build_index, radius_neighbors, random_rotation_perturb, voxel_downsample
from .network import KpConvModel, load_weights, network_forward
from .pipeline import run_pipeline
from .registration import mutual_nn_matches, ransac_register


def _add_model_args(parser):
    parser.add_argument("--model", help="weight file; omit to use a seeded random model")
    parser.add_argument("--random-seed", type=int, default=0,
                        help="seed for the random model when --model is omitted")
    parser.add_argument("--base-grid", type=float, default=0.03,
                        help="base grid of the random model (meters)")


def _resolve_model(args) -> KpConvModel:
    if args.model:
        return load_weights(args.model)
    return KpConvModel.random(args.random_seed, base_grid=args.base_grid)


def _load_cloud(path, voxel=None) -> PointCloud:
    cloud = read_ply(path)
    if voxel:
        cloud = voxel_downsample(cloud, voxel)
    return cloud


def write_keypoints_csv(path, keypoints: KeypointSet) -> None:
    lines = ["index,score"]
    lines += [f"{i},{s:.10g}" for i, s in zip(keypoints.indices, keypoints.scores)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_keypoints_csv(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    return np.array([int(l.split(",")[0]) for l in lines[1:] if l.strip()], dtype=np.int64)


def _cmd_describe(args) -> int:
    model = _resolve_model(args)
    cloud = _load_cloud(args.cloud, args.voxel)
    features = network_forward(model, cloud)
    write_features(args.out, features)
    if args.sampled_cloud:
        write_ply(args.sampled_cloud, cloud)
    if args.csv:
        lines = [",".join(f"{v:.10g}" for v in row) for row in features.descriptors]
        Path(args.csv).write_text("\n".join(lines) + "\n")
    print(f"described {cloud.n} points -> {args.out}")
    return 0


def _score_map(model, cloud, radius):
    features = network_forward(model, cloud)
    radius = radius or model.first_radius
    neighbors = radius_neighbors(build_index(cloud), cloud, radius)
    return features, score_cloud(features, neighbors)


def _cmd_detect(args) -> int:
    model = _resolve_model(args)
    cloud = _load_cloud(args.cloud, args.voxel)
    _, scores = _score_map(model, cloud, args.radius)
    k = min(args.num_keypoints, cloud.n)
    keypoints = select_keypoints(scores, k)
    write_keypoints_csv(args.out, keypoints)
    if args.scores_csv:
        everything = select_keypoints(scores, cloud.n)
        write_keypoints_csv(args.scores_csv, everything)
    print(f"detected {k} keypoints -> {args.out}")
    return 0


def _cmd_match(args) -> int:
    feat_a = read_features(args.features_a)
    feat_b = read_features(args.features_b)
    sel_a = read_keypoints_csv(args.keypoints_a) if args.keypoints_a else None
    sel_b = read_keypoints_csv(args.keypoints_b) if args.keypoints_b else None
    matches = mutual_nn_matches(feat_a, feat_b, sel_a, sel_b)
    lines = ["index_a,index_b,distance"]
    lines += [
        f"{i},{j},{d:.10g}" for (i, j), d in zip(matches.pairs, matches.distances)
    ]
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"{len(matches)} mutual matches -> {args.out}")
    return 0


def _cmd_register(args) -> int:
    cloud_a = read_ply(args.cloud_a)
    cloud_b = read_ply(args.cloud_b)
    feat_a = read_features(args.features_a)
    feat_b = read_features(args.features_b)
    if feat_a.n != cloud_a.n or feat_b.n != cloud_b.n:
        raise SystemExit("feature files do not match the cloud sizes")
    sel_a = read_keypoints_csv(args.keypoints_a) if args.keypoints_a else None
    sel_b = read_keypoints_csv(args.keypoints_b) if args.keypoints_b else None
    matches = mutual_nn_matches(feat_a, feat_b, sel_a, sel_b)
    result = ransac_register(
        cloud_a, cloud_b, matches,
        max_iters=args.iterations, inlier_threshold=args.threshold,
        sample_size=args.sample_size, seed=args.seed, adaptive=args.adaptive,
    )
    if not result.success:
        print("registration failed: no consensus", file=sys.stderr)
        return 1
    key = (Path(args.cloud_a).stem, Path(args.cloud_b).stem)
    write_pose_file(args.out, [(key, result.transform)])
    if args.inliers_csv:
        lines = ["index_a,index_b,distance"]
        lines += [
            f"{i},{j},{d:.10g}"
            for (i, j), d in zip(result.inlier_pairs.pairs, result.inlier_pairs.distances)
        ]
        Path(args.inliers_csv).write_text("\n".join(lines) + "\n")
    print(
        f"registered with {len(result.inlier_pairs)}/{len(matches)} inliers "
        f"(rmse {result.inlier_rmse:.4g} m) -> {args.out}"
    )
    return 0


def _evaluate_config(args):
    if args.config:
        config = read_config(args.config)
    else:
        config = profile_config(args.profile)
    overrides = {}
    for field, flag in (
        ("voxel_size", "voxel"),
        ("tau1", "tau1"),
        ("tau2", "tau2"),
        ("ransac_iterations", "ransac_iterations"),
        ("ransac_threshold", "ransac_threshold"),
        ("repeatability_threshold", "repeatability_threshold"),
        ("detection_radius", "radius"),
        ("seed", "seed"),
    ):
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    if args.keypoint_counts:
        overrides["keypoint_counts"] = tuple(int(v) for v in args.keypoint_counts.split(","))
    if args.repeatability_counts:
        overrides["repeatability_counts"] = tuple(
            int(v) for v in args.repeatability_counts.split(",")
        )
    return replace(config, **overrides) if overrides else config


def _cmd_evaluate(args) -> int:
    config = _evaluate_config(args)
    manifest = load_manifest(args.manifest, args.poses)
    model = _resolve_model(args)
    report = run_pipeline(config, manifest, model, mode=args.mode)
    Path(args.out).write_text(report.to_csv())
    print(report.to_table())
    print(f"report -> {args.out}")
    return 0


def _cmd_perturb(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest, args.poses)

    # one deterministic rotation per distinct fragment
    rotations = {}
    applied = []
    for entry in manifest.entries:
        for path in (entry.path_a, entry.path_b):
            if path in rotations:
                continue
            seed = [args.seed, zlib.crc32(path.stem.encode())]
            cloud = read_ply(path)
            rotated, t = random_rotation_perturb(cloud, np.random.default_rng(seed))
            write_ply(out_dir / path.name, rotated)
            rotations[path] = t
            applied.append(((path.stem,), t))
    write_pose_file(out_dir / "applied_rotations.txt", applied)

    # ground truth for rotated pairs: R_a . T . R_b^-1
    entries = []
    manifest_lines = ["# scene path_a path_b overlap"]
    for entry in manifest.entries:
        t_new = compose(
            rotations[entry.path_a], compose(entry.transform, rotations[entry.path_b].inverse())
        )
        entries.append(((entry.path_a.stem, entry.path_b.stem), t_new))
        manifest_lines.append(
            f"{entry.scene} {entry.path_a.name} {entry.path_b.name} {entry.overlap}"
        )
    write_pose_file(out_dir / "poses.txt", entries)
    (out_dir / "manifest.txt").write_text("\n".join(manifest_lines) + "\n")
    print(f"rotated {len(rotations)} fragments -> {out_dir}")
    return 0


def _cmd_convert_poses(args) -> int:
    entries = read_pose_file(args.log)
    write_pose_file(args.out, entries)
    print(f"converted {len(entries)} poses -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kp3feat",
        description="Dense 3D keypoint detection, description and registration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="cloud -> descriptor CSV / feature binary")
    p.add_argument("cloud")
    _add_model_args(p)
    p.add_argument("--voxel", type=float, help="voxel-downsample before describing")
    p.add_argument("--out", required=True, help="feature binary output")
    p.add_argument("--csv", help="also write descriptors as CSV")
    p.add_argument("--sampled-cloud", help="write the downsampled cloud as PLY")
    p.set_defaults(func=_cmd_describe)

    p = sub.add_parser("detect", help="cloud -> keypoint CSV")
    p.add_argument("cloud")
    _add_model_args(p)
    p.add_argument("--voxel", type=float)
    p.add_argument("--radius", type=float, help="detection radius (default: first conv radius)")
    p.add_argument("--num-keypoints", type=int, default=512)
    p.add_argument("--out", required=True)
    p.add_argument("--scores-csv", help="also export the full score map")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("match", help="two feature files -> correspondence CSV")
    p.add_argument("--features-a", required=True)
    p.add_argument("--features-b", required=True)
    p.add_argument("--keypoints-a")
    p.add_argument("--keypoints-b")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("register", help="two clouds + features -> transform + inliers")
    p.add_argument("--cloud-a", required=True)
    p.add_argument("--cloud-b", required=True)
    p.add_argument("--features-a", required=True)
    p.add_argument("--features-b", required=True)
    p.add_argument("--keypoints-a")
    p.add_argument("--keypoints-b")
    p.add_argument("--threshold", type=float, default=0.10)
    p.add_argument("--iterations", type=int, default=50_000)
    p.add_argument("--sample-size", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--out", required=True, help="pose file output")
    p.add_argument("--inliers-csv")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("evaluate", help="manifest -> benchmark report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--poses", required=True)
    _add_model_args(p)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--profile", default="indoor", choices=("indoor", "outdoor"))
    p.add_argument("--mode", default="pred", choices=("pred", "rand"))
    p.add_argument("--voxel", type=float)
    p.add_argument("--tau1", type=float)
    p.add_argument("--tau2", type=float)
    p.add_argument("--ransac-iterations", type=int)
    p.add_argument("--ransac-threshold", type=float)
    p.add_argument("--repeatability-threshold", type=float)
    p.add_argument("--radius", type=float, help="detection radius override")
    p.add_argument("--seed", type=int)
    p.add_argument("--keypoint-counts", help="comma separated, e.g. 5000,2500,1000,500,250")
    p.add_argument("--repeatability-counts", help="comma separated, e.g. 4,8,...,512")
    p.add_argument("--out", required=True, help="report CSV output")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("perturb", help="build a randomly rotated copy of a test set")
    p.add_argument("--manifest", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_perturb)

    p = sub.add_parser("convert-poses", help="normalize an external pose log into the pose format")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_convert_poses)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
