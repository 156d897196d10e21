"""Compact photometric bundle adjustment over a voxel grid and camera twists."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .render import RayBatch, RenderConfig, backward
from .scene import ViewSet, VoxelGrid, softplus_inverse
from .se3 import PoseSE3, refine_pose, twist_to_refinement

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class BADivergence(RuntimeError):
    """Raised when the photometric loss stops being finite."""


@dataclass(frozen=True)
class ScheduleConfig:
    iterations: int = 2000
    lr_pose_start: float = 1e-2
    lr_pose_end: float = 1e-4
    lr_grid_start: float = 1e-1
    lr_grid_end: float = 1e-2
    modulation: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.modulation < 1:
            raise ValueError("modulation must be >= 1")
        if self.lr_pose_end > self.lr_pose_start or self.lr_grid_end > self.lr_grid_start:
            raise ValueError("end learning rates must not exceed start rates")
        if min(self.lr_pose_end, self.lr_grid_end) < 0:
            raise ValueError("learning rates must be non-negative")


def learning_rate(t: float, total: float, lr0: float, lr1: float, modulation: float = 1.0) -> float:
    """Exponential interpolation from ``lr0`` to ``lr1`` with a modulation exponent.

    ``lr0 * (lr1/lr0) ** ((t/total) ** modulation)``; larger modulation keeps
    the rate near ``lr0`` for longer.
    """
    if lr0 == 0.0:
        return 0.0
    frac = min(max(t / total, 0.0), 1.0)
    return lr0 * (lr1 / lr0) ** (frac**modulation)


@dataclass(frozen=True)
class BAOptions:
    """Settings shared by every compact BA run."""

    grid_resolution: int = 24
    batch_size: int = 1024
    render: RenderConfig = RenderConfig(samples_per_ray=32)
    init_density: float = 0.1
    init_color: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if self.grid_resolution < 2:
            raise ValueError("grid_resolution must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.init_density <= 0:
            raise ValueError("init_density must be positive")
        if not 0 <= self.init_color <= 1:
            raise ValueError("init_color must be in [0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


class _Adam:
    def __init__(self, size: int):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step = 0

    def update(self, param: np.ndarray, grad: np.ndarray, lr: float):
        # param must be a contiguous array; updated in place through a flat view
        _kernels.adam_step(param.reshape(-1), grad.reshape(-1), self.m, self.v,
                           lr, BETA1, BETA2, ADAM_EPS, self.step)


@dataclass
class BAState:
    view_ids: list
    base_poses: list
    twists: np.ndarray
    grid: VoxelGrid
    loss_trace: list = field(default_factory=list)
    lr_pose_trace: list = field(default_factory=list)
    lr_grid_trace: list = field(default_factory=list)

    def refined_poses(self) -> dict[int, PoseSE3]:
        return {
            vid: refine_pose(base, twist_to_refinement(tw))
            for vid, base, tw in zip(self.view_ids, self.base_poses, self.twists)
        }


def initial_grid(resolution: int, bbox, density: float, color: float) -> VoxelGrid:
    res = (resolution,) * 3
    raw = np.full(res, float(softplus_inverse(density)))
    return VoxelGrid(raw, np.full(res + (3,), color), bbox)


def run_compact_ba(views: ViewSet, poses: dict, sched: ScheduleConfig, seed: int = 0,
                   options: BAOptions = BAOptions(), bbox=None, grid: VoxelGrid | None = None,
                   callback=None) -> BAState:
    """Jointly optimize a fresh voxel grid and one twist per view.

    ``poses`` maps view id to the current estimate; every view must have one.
    ``callback(it, state)`` is invoked after each step when given.
    """
    ids = views.ids
    missing = [v for v in ids if poses.get(v) is None]
    if missing:
        raise ValueError(f"views without a pose estimate: {missing}")
    if grid is None:
        from .scene import DEFAULT_BBOX

        grid = initial_grid(options.grid_resolution, bbox or DEFAULT_BBOX,
                            options.init_density, options.init_color)
    else:
        grid = grid.copy()
    base = [poses[v] for v in ids]
    state = BAState(list(ids), base, np.zeros((len(ids), 6)), grid)
    images = np.stack([v.image for v in views])
    intr = views.intrinsics
    n_views, n_pix = len(ids), intr.width * intr.height
    rng = np.random.default_rng(seed)

    adam_raw = _Adam(grid.density_raw.size)
    adam_col = _Adam(grid.color.size)
    adam_pose = _Adam(state.twists.size)
    per_view = np.full(n_views, options.batch_size // n_views)
    per_view[: options.batch_size - per_view.sum()] += 1
    view_index = np.repeat(np.arange(n_views), per_view)
    total = sched.iterations
    for it in range(total):
        lr_p = learning_rate(it, total, sched.lr_pose_start, sched.lr_pose_end, sched.modulation)
        lr_g = learning_rate(it, total, sched.lr_grid_start, sched.lr_grid_end, sched.modulation)
        batch = RayBatch(view_index, rng.integers(0, n_pix, len(view_index)),
                         rng.random((len(view_index), options.render.samples_per_ray)))
        loss, grads = backward(grid, base, state.twists, images, intr, options.render, batch,
                               workers=options.workers)
        if not math.isfinite(loss):
            raise BADivergence(f"non-finite loss at iteration {it}")
        for opt in (adam_raw, adam_col, adam_pose):
            opt.step += 1
        adam_raw.update(grid.density_raw, grads.density, lr_g)
        adam_col.update(grid.color, grads.color, lr_g)
        np.clip(grid.color, 0.0, 1.0, out=grid.color)
        if lr_p > 0:
            adam_pose.update(state.twists, grads.twist, lr_p)
        state.loss_trace.append(loss)
        state.lr_pose_trace.append(lr_p)
        state.lr_grid_trace.append(lr_g)
        if callback is not None:
            callback(it, state)
    return state
