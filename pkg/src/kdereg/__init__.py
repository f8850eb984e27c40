"""Density-weighted rigid registration of RGB-D keypoint correspondences.

Depth frames are lifted to per-object point clouds, matched keypoints are
weighted by a kernel density estimate of their spatial distribution, and
a weighted closed-form solve recovers the rigid motion between views.
"""

from .backprojection import (
    CameraModel,
    DepthImage,
    Intrinsics,
    MaskImage,
    align_depth_to_color,
    backproject,
    ego_segment,
    fill_holes,
    lift_pixels,
    project,
    rectify_with_mask,
    remove_outliers,
    segment_instances,
)
from .bench import (
    SweepConfig,
    generate_scene,
    run_angle_sweep,
    run_scaling_benchmark,
)
from .embedding import EmbeddingConfig, embed, embed_image
from .exceptions import DegenerateError, FormatError, InputError
from .geometry import (
    CorrespondenceSet,
    PointCloud,
    RigidTransform,
    apply_transform,
    compose,
    rmse,
    rotation_angle,
)
from .solver import AlignmentResult, align_clouds, icp_point_to_point, solve_weighted
from .weighting import (
    BandwidthFallbackWarning,
    WeightVector,
    fft_kde,
    init_weights,
    isj_bandwidth,
    linear_bin,
    weigh_correspondences,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentResult",
    "BandwidthFallbackWarning",
    "CameraModel",
    "CorrespondenceSet",
    "DegenerateError",
    "DepthImage",
    "EmbeddingConfig",
    "FormatError",
    "InputError",
    "Intrinsics",
    "MaskImage",
    "PointCloud",
    "RigidTransform",
    "SweepConfig",
    "WeightVector",
    "align_clouds",
    "align_depth_to_color",
    "apply_transform",
    "backproject",
    "compose",
    "ego_segment",
    "embed",
    "embed_image",
    "fft_kde",
    "fill_holes",
    "generate_scene",
    "icp_point_to_point",
    "init_weights",
    "isj_bandwidth",
    "lift_pixels",
    "linear_bin",
    "project",
    "rectify_with_mask",
    "remove_outliers",
    "rmse",
    "rotation_angle",
    "run_angle_sweep",
    "run_scaling_benchmark",
    "segment_instances",
    "solve_weighted",
    "weigh_correspondences",
]
