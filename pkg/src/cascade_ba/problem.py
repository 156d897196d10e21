"""Synthetic registration problems: scene, camera rig, noisy and missing poses.

Every random draw comes from a named sub-stream of one global seed, so the
library, the CLI and the tests build identical problems from the same seed.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .render import RenderConfig, synthesize_views
from .scene import (DEFAULT_FOV_DEG, DEFAULT_RIG_RADIUS, CameraIntrinsics, SceneSpec, ViewSet,
                    VoxelGrid, drop_poses, generate_scene, sample_hemisphere_cameras)
from .se3 import NoiseConfig, NoiseSampler, exp_map, perturb_pose


def substream_seed(seed: int, name: str) -> int:
    """Independent integer seed for a named random stream under a global seed."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def perturb_all(poses: dict, coefficient: float, seed: int) -> dict:
    """Perturb every pose with its own noise draw, in ascending view-id order.

    A zero coefficient returns the poses untouched (not recomposed with an
    identity, which could flip the sign of zero entries).
    """
    if coefficient == 0:
        return dict(poses)
    sampler = NoiseSampler(NoiseConfig(coefficient, substream_seed(seed, "noise")))
    out = {}
    for vid in sorted(poses):
        xi = sampler.sample()
        out[vid] = None if poses[vid] is None else perturb_pose(poses[vid], exp_map(xi))
    return out


@dataclass(frozen=True)
class RigParams:
    n_views: int = 20
    radius: float = DEFAULT_RIG_RADIUS
    width: int = 64
    height: int = 64
    fov_deg: float = DEFAULT_FOV_DEG


@dataclass
class Problem:
    grid: VoxelGrid         # ground-truth scene
    views: ViewSet          # images with ground-truth poses
    gt: dict                # view id -> ground-truth pose
    init: dict              # view id -> initial estimate, None where dropped

    @property
    def dropped(self) -> list:
        return [v for v, p in self.init.items() if p is None]

    def observed(self) -> ViewSet:
        """Views carrying the initial estimates instead of the ground truth."""
        return self.views.with_poses(self.init)


def synthesize(seed: int, rig: RigParams = RigParams(), n_blobs: int = 12,
               resolution: int = 48, render: RenderConfig = RenderConfig()) -> tuple[VoxelGrid, ViewSet]:
    grid = generate_scene(SceneSpec(seed=substream_seed(seed, "scene"), n_blobs=n_blobs, resolution=resolution))
    intr = CameraIntrinsics.from_fov(rig.width, rig.height, rig.fov_deg)
    poses = sample_hemisphere_cameras(rig.n_views, rig.radius, seed=substream_seed(seed, "rig"))
    return grid, synthesize_views(grid, poses, intr, render)


def drop(views: ViewSet, fraction: float, seed: int) -> ViewSet:
    return drop_poses(views, fraction, seed=substream_seed(seed, "drop"))


def build_problem(seed: int, noise: float = 0.15, drop_fraction: float = 0.0,
                  rig: RigParams = RigParams(), n_blobs: int = 12, resolution: int = 48) -> Problem:
    """Scene, rig and initial estimates for one pinned seed."""
    grid, views = synthesize(seed, rig, n_blobs, resolution)
    gt = views.poses()
    init = perturb_all(gt, noise, seed)
    if drop_fraction > 0:
        kept = drop(views, drop_fraction, seed).poses()
        init = {v: (init[v] if kept[v] is not None else None) for v in init}
    return Problem(grid, views, gt, init)


def corrupt(poses: dict, ids, coefficient: float, seed: int) -> dict:
    """Perturb only the poses in ``ids`` (stream ``corrupt``)."""
    sampler = NoiseSampler(NoiseConfig(coefficient, substream_seed(seed, "corrupt")))
    out = dict(poses)
    for vid in sorted(ids):
        out[vid] = perturb_pose(poses[vid], exp_map(sampler.sample()))
    return out

