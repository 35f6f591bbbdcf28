"""Dense detection, description and rigid registration of 3D local features."""

from .core import (
    CorrespondenceSet,
    FeatureMap,
    PointCloud,
    RigidTransform,
    ScoreMap,
    apply_transform,
    compose,
    rotation_about_axis,
)
from .neighbors import (
    NeighborhoodIndex,
    NeighborLists,
    build_index,
    radius_neighbors,
    random_rotation_perturb,
    uniform_downsample,
    voxel_downsample,
)
from .kernels import ConvLayer, KernelLayout, correlation, kernel_dispositions, kpconv_apply
from .network import (
    KpConvModel,
    layer_forward,
    load_weights,
    network_forward,
    save_weights,
)
from .detector import (
    KeypointSet,
    channel_max_scores,
    detection_scores,
    hard_keypoints,
    saliency_scores,
    select_keypoints,
    softmax_saliency_scores,
)
from .registration import (
    RegistrationResult,
    estimate_rigid,
    icp_refine,
    mutual_nn_matches,
    ransac_register,
)
from .metrics import (
    PairEvaluation,
    feature_matching_recall,
    inlier_ratio,
    registration_recall,
    relative_repeatability,
    rmse_over_correspondences,
    rte_rre,
    success_rate,
)

__version__ = "0.1.0"

__all__ = [
    "CorrespondenceSet",
    "FeatureMap",
    "PointCloud",
    "RigidTransform",
    "ScoreMap",
    "apply_transform",
    "compose",
    "rotation_about_axis",
    "NeighborhoodIndex",
    "NeighborLists",
    "build_index",
    "radius_neighbors",
    "random_rotation_perturb",
    "uniform_downsample",
    "voxel_downsample",
    "ConvLayer",
    "KernelLayout",
    "correlation",
    "kernel_dispositions",
    "kpconv_apply",
    "KpConvModel",
    "layer_forward",
    "load_weights",
    "network_forward",
    "save_weights",
    "KeypointSet",
    "channel_max_scores",
    "detection_scores",
    "hard_keypoints",
    "saliency_scores",
    "select_keypoints",
    "softmax_saliency_scores",
    "RegistrationResult",
    "estimate_rigid",
    "icp_refine",
    "mutual_nn_matches",
    "ransac_register",
    "PairEvaluation",
    "feature_matching_recall",
    "inlier_ratio",
    "registration_recall",
    "relative_repeatability",
    "rmse_over_correspondences",
    "rte_rre",
    "success_rate",
    "__version__",
]
