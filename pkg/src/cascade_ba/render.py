"""Differentiable emission-absorption rendering of a :class:`VoxelGrid`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .scene import CameraIntrinsics, View, ViewSet, VoxelGrid
from .se3 import PoseSE3, right_jacobian, so3_exp

_NO_JITTER = np.zeros((0, 0))
RAY_CHUNKS = 8


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 64
    near: float = 0.5
    far: float = 12.0
    background: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if not (self.near >= 0 and self.far > self.near):
            raise ValueError("need 0 <= near < far")

    @property
    def bg(self) -> np.ndarray:
        return np.asarray(self.background, dtype=float)


@dataclass
class RenderedView:
    rgb: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray


@dataclass
class GradientBundle:
    density: np.ndarray
    color: np.ndarray
    twist: np.ndarray  # (n_views, 6), ordered (rho, omega)


def _trace(grid: VoxelGrid, origins, dirs, cfg: RenderConfig, jitter=None):
    n = len(origins)
    rgb = np.empty((n, 3))
    depth = np.empty(n)
    opacity = np.empty(n)
    _kernels.render_rays(
        grid.density_raw, grid.color, grid.lo, grid.hi,
        np.ascontiguousarray(origins, dtype=float), np.ascontiguousarray(dirs, dtype=float),
        float(cfg.near), float(cfg.far), int(cfg.samples_per_ray),
        _NO_JITTER if jitter is None else jitter, cfg.bg, rgb, depth, opacity,
    )
    return rgb, depth, opacity


def camera_rays(pose: PoseSE3, intr: CameraIntrinsics):
    """World-frame origins and unit directions for every pixel, each (H*W, 3)."""
    d = intr.pixel_directions().reshape(-1, 3) @ pose.R.T
    o = np.broadcast_to(pose.t, d.shape)
    return np.ascontiguousarray(o), np.ascontiguousarray(d)


def render(grid: VoxelGrid, pose: PoseSE3, intr: CameraIntrinsics,
           cfg: RenderConfig = RenderConfig(), jitter_seed: int | None = None) -> RenderedView:
    """Render one view.  Bin midpoints are used unless ``jitter_seed`` is given."""
    o, d = camera_rays(pose, intr)
    jitter = None
    if jitter_seed is not None:
        jitter = np.random.default_rng(jitter_seed).random((len(o), cfg.samples_per_ray))
    rgb, depth, opacity = _trace(grid, o, d, cfg, jitter)
    h, w = intr.height, intr.width
    return RenderedView(rgb.reshape(h, w, 3), depth.reshape(h, w), opacity.reshape(h, w))


def photometric_loss(rendered, reference) -> float:
    """Mean squared RGB error."""
    a = rendered.rgb if isinstance(rendered, RenderedView) else np.asarray(rendered)
    b = np.asarray(reference)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def synthesize_views(grid: VoxelGrid, poses, intr: CameraIntrinsics,
                     cfg: RenderConfig = RenderConfig(), mask_threshold: float = 0.5) -> ViewSet:
    """Ground-truth view set: midpoint renders, masks from accumulated opacity."""
    views = []
    for i, pose in enumerate(poses):
        out = render(grid, pose, intr, cfg)
        views.append(View(i, out.rgb, pose, out.opacity > mask_threshold))
    return ViewSet(views, intr)


@dataclass
class RayBatch:
    """Rays drawn from several views: view index and flat pixel index per ray."""

    view_index: np.ndarray
    pixel_index: np.ndarray
    jitter: np.ndarray | None = None


def current_rotations(base_R: np.ndarray, twists: np.ndarray) -> np.ndarray:
    return np.stack([Rb @ so3_exp(w) for Rb, w in zip(base_R, twists[:, 3:])])


def backward(grid: VoxelGrid, base_poses, twists, images, intr: CameraIntrinsics,
             cfg: RenderConfig, batch: RayBatch, workers: int = 1):
    """Photometric loss over a ray batch and its analytic gradients.

    The camera of view ``v`` is ``[R_v exp(omega_v) | t_v + rho_v]``;
    ``images`` is an array (n_views, H, W, 3) of references.  Returns
    ``(loss, GradientBundle)`` where the loss is the mean over rays and
    channels of the squared error.
    """
    base_R = np.stack([p.R for p in base_poses])
    base_t = np.stack([p.t for p in base_poses])
    twists = np.asarray(twists, dtype=float).reshape(len(base_poses), 6)
    Rs = current_rotations(base_R, twists)
    dirs_c = intr.pixel_directions().reshape(-1, 3)[batch.pixel_index]
    vi = batch.view_index
    dirs = np.einsum("nij,nj->ni", Rs[vi], dirs_c)
    origins = base_t[vi] + twists[vi, :3]
    targets = images.reshape(len(base_poses), -1, 3)[vi, batch.pixel_index]
    n = len(vi)
    scale = 1.0 / (3 * n)
    jitter = _NO_JITTER if batch.jitter is None else np.ascontiguousarray(batch.jitter)

    g_raw = np.zeros_like(grid.density_raw)
    g_col = np.zeros_like(grid.color)
    g_o = np.empty((n, 3))
    g_d = np.empty((n, 3))
    rgb = np.empty((n, 3))
    args = (grid.density_raw, grid.color, grid.lo, grid.hi)
    sse = _chunked_backward(args, origins, dirs, targets, cfg, jitter, scale,
                            g_raw, g_col, g_o, g_d, rgb, workers)

    g_twist = np.zeros((len(base_poses), 6))
    np.add.at(g_twist[:, :3], vi, g_o)
    # d(R d_c)/d(omega) = -R [d_c]x J_r(omega)
    local = np.cross(dirs_c, np.einsum("nji,nj->ni", Rs[vi], g_d))
    acc = np.zeros((len(base_poses), 3))
    np.add.at(acc, vi, local)
    for v in range(len(base_poses)):
        g_twist[v, 3:] = right_jacobian(twists[v, 3:]).T @ acc[v]
    return sse * scale, GradientBundle(g_raw, g_col, g_twist)


def _chunked_backward(args, origins, dirs, targets, cfg, jitter, scale,
                      g_raw, g_col, g_o, g_d, rgb, workers):
    """Run the kernel over a fixed split of the rays and sum in chunk order.

    The split does not depend on ``workers``, so any worker count gives
    bit-identical gradients.
    """
    bounds = np.linspace(0, len(origins), RAY_CHUNKS + 1).astype(int)

    def run(c):
        a, b = bounds[c], bounds[c + 1]
        gr = np.zeros_like(g_raw)
        gc = np.zeros_like(g_col)
        jit = jitter[a:b] if jitter.shape[0] else jitter
        sse = _kernels.backward_rays(
            *args, origins[a:b], dirs[a:b], targets[a:b], float(cfg.near), float(cfg.far),
            int(cfg.samples_per_ray), jit, cfg.bg, scale, gr, gc, g_o[a:b], g_d[a:b], rgb[a:b])
        return sse, gr, gc

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(RAY_CHUNKS)))
    else:
        parts = [run(c) for c in range(RAY_CHUNKS)]
    sse = 0.0
    for part_sse, gr, gc in parts:
        g_raw += gr
        g_col += gc
        sse += part_sse
    return sse
