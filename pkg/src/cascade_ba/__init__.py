"""Cascaded photometric bundle adjustment over a differentiable voxel grid.

The pipeline refines noisy (or missing) camera poses by chaining short
bundle-adjustment stages, scoring every view between stages and replacing
the poses of views that score poorly.
"""

from .ba import BAOptions, BAState, ScheduleConfig, run_compact_ba
from .cascade import CascadeConfig, PipelineResult, init_missing_poses, run_cascade, single_stage
from .criterion import ClassifyPolicy, ScoreParams, score_views
from .evaluate import pose_errors, procrustes_align
from .problem import build_problem, substream_seed
from .render import RenderConfig, render
from .scene import CameraIntrinsics, SceneSpec, View, ViewSet, VoxelGrid, generate_scene
from .se3 import PoseSE3, exp_map, log_map

__version__ = "0.1.0"

__all__ = [
    "BAOptions", "BAState", "CameraIntrinsics", "CascadeConfig", "ClassifyPolicy", "PipelineResult",
    "PoseSE3", "RenderConfig", "SceneSpec", "ScheduleConfig", "ScoreParams", "View", "ViewSet",
    "VoxelGrid", "build_problem", "exp_map", "generate_scene", "init_missing_poses", "log_map",
    "pose_errors", "procrustes_align", "render", "run_cascade", "run_compact_ba", "score_views",
    "single_stage", "substream_seed",
]
