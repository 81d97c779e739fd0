"""Geometry, depth losses, matching, pose solving and pose/depth metrics for
reference-based 6D object pose estimation."""

from .errors import InvalidInputError, NumericalFailure
from .geometry import CameraIntrinsics, RigidTransform, backproject, normals_from_depth, project
from .losses import LossWeights, fit_scale_shift, rescale_with_prior, total_depth_loss
from .matching import FeatureMap, MatchConfig, MatchSet, builtin_features, match_images
from .metrics import MeshModel, RecallConfig, depth_metrics, pose_recalls, render_depth
from .pose import Correspondence3D, PoseEstimate, compose_query_pose, lift_matches, rigid_fit, robust_register

__version__ = "0.1.0"

__all__ = [
    "InvalidInputError", "NumericalFailure", "CameraIntrinsics", "RigidTransform", "backproject",
    "normals_from_depth", "project", "LossWeights", "fit_scale_shift", "rescale_with_prior",
    "total_depth_loss", "FeatureMap", "MatchConfig", "MatchSet", "builtin_features", "match_images",
    "MeshModel", "RecallConfig", "depth_metrics", "pose_recalls", "render_depth",
    "Correspondence3D", "PoseEstimate", "compose_query_pose", "lift_matches", "rigid_fit",
    "robust_register",
]
