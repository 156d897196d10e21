"""Voxel scenes, camera rigs and view sets."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .se3 import PoseSE3, so3_exp

# Raw (pre-softplus) value used for empty space; softplus(-40) ~ 4e-18.
EMPTY_RAW = -40.0
OCCUPIED_THRESHOLD = 1e-6

DEFAULT_BBOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
DEFAULT_RIG_RADIUS = 3.0
DEFAULT_FOV_DEG = 40.0


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=float)
    return np.where(y > 20.0, y, np.log(np.expm1(np.minimum(y, 20.0))))


@dataclass
class VoxelGrid:
    """Density and color samples on the lattice points of a box.

    Values sit on ``resolution`` lattice points spanning ``bbox`` corner to
    corner.  Density is stored pre-activation (``density_raw``); the physical
    extinction coefficient is ``softplus(density_raw)``.
    """

    density_raw: np.ndarray
    color: np.ndarray
    bbox: tuple = DEFAULT_BBOX

    def __post_init__(self):
        self.density_raw = np.ascontiguousarray(self.density_raw, dtype=np.float64)
        self.color = np.ascontiguousarray(self.color, dtype=np.float64)
        lo, hi = (np.asarray(b, dtype=float) for b in self.bbox)
        if self.density_raw.ndim != 3 or min(self.density_raw.shape) < 2:
            raise ValueError(f"density must be a 3-D array with >= 2 points per axis, got {self.density_raw.shape}")
        if self.color.shape != self.density_raw.shape + (3,):
            raise ValueError(f"color shape {self.color.shape} does not match density {self.density_raw.shape}")
        if not np.all(hi > lo):
            raise ValueError("bbox must have positive extent on every axis")
        self.bbox = (tuple(lo.tolist()), tuple(hi.tolist()))

    @classmethod
    def constant(cls, resolution, density: float, color, bbox=DEFAULT_BBOX) -> VoxelGrid:
        res = tuple(int(r) for r in resolution)
        raw = np.full(res, float(softplus_inverse(density)) if density > 0 else EMPTY_RAW)
        col = np.broadcast_to(np.asarray(color, dtype=float), res + (3,)).copy()
        return cls(raw, col, bbox)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.density_raw.shape

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.bbox[0])

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.bbox[1])

    @property
    def density(self) -> np.ndarray:
        return softplus(self.density_raw)

    def lattice_points(self) -> np.ndarray:
        axes = [np.linspace(self.lo[i], self.hi[i], n) for i, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def occupancy(self) -> float:
        return float(np.mean(self.density > OCCUPIED_THRESHOLD))

    def copy(self) -> VoxelGrid:
        return VoxelGrid(self.density_raw.copy(), self.color.copy(), self.bbox)


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> CameraIntrinsics:
        focal = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
        return cls(focal, width / 2, height / 2, width, height)

    def scaled(self, factor: int) -> CameraIntrinsics:
        """Intrinsics for an image downscaled by an integer factor."""
        return CameraIntrinsics(
            self.focal / factor, self.cx / factor, self.cy / factor,
            self.width // factor, self.height // factor,
        )

    def pixel_directions(self) -> np.ndarray:
        """Unit camera-frame ray directions through pixel centers, shape (H, W, 3)."""
        j, i = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(j - self.cx) / self.focal, (i - self.cy) / self.focal, np.ones_like(j)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class View:
    view_id: int
    image: np.ndarray
    pose: PoseSE3 | None = None
    mask: np.ndarray | None = None


@dataclass(frozen=True)
class ViewSet:
    views: tuple
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        views = tuple(self.views)
        object.__setattr__(self, "views", views)
        ids = [v.view_id for v in views]
        if len(set(ids)) != len(ids):
            raise ValueError("view ids must be unique")
        shape = (self.intrinsics.height, self.intrinsics.width, 3)
        for v in views:
            if v.image.shape != shape:
                raise ValueError(f"view {v.view_id}: image shape {v.image.shape} != {shape}")

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    @property
    def ids(self) -> list[int]:
        return [v.view_id for v in self.views]

    def __getitem__(self, view_id: int) -> View:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(view_id)

    def poses(self) -> dict[int, PoseSE3 | None]:
        return {v.view_id: v.pose for v in self.views}

    def missing(self) -> list[int]:
        return [v.view_id for v in self.views if v.pose is None]

    def with_poses(self, poses: dict) -> ViewSet:
        views = [replace(v, pose=poses.get(v.view_id, v.pose)) for v in self.views]
        return ViewSet(views, self.intrinsics)

    def subset(self, ids) -> ViewSet:
        keep = set(ids)
        return ViewSet([v for v in self.views if v.view_id in keep], self.intrinsics)

    def downscaled(self, factor: int) -> ViewSet:
        if factor == 1:
            return self
        views = []
        for v in self.views:
            mask = None
            if v.mask is not None:
                mask = box_downscale(v.mask.astype(float), factor) > 0.5
            views.append(replace(v, image=box_downscale(v.image, factor), mask=mask))
        return ViewSet(views, self.intrinsics.scaled(factor))


def box_downscale(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    h2, w2 = h // factor, w // factor
    img = img[: h2 * factor, : w2 * factor]
    return img.reshape(h2, factor, w2, factor, *img.shape[2:]).mean(axis=(1, 3))


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_blobs: int = 12
    resolution: int = 48
    density_scale: float = 30.0


def _random_rotation(rng) -> np.ndarray:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0, math.pi))


def generate_scene(spec: SceneSpec = SceneSpec(), bbox=DEFAULT_BBOX) -> VoxelGrid:
    """Soft textured ellipsoids with random colors, placed inside ``bbox``.

    Each blob has density ``scale * (1 - r²)²`` inside its ellipsoid (``r`` is
    the normalized ellipsoidal radius) and zero outside.  Overlapping blobs
    add densities and mix colors by density.
    """
    if spec.n_blobs < 1:
        raise ValueError("n_blobs must be >= 1")
    if spec.resolution < 8:
        raise ValueError("resolution must be >= 8 on every axis")
    rng = np.random.default_rng(spec.seed)
    res = (spec.resolution,) * 3
    grid = VoxelGrid(np.zeros(res), np.zeros(res + (3,)), bbox)
    pts = grid.lattice_points()
    half = 0.5 * (grid.hi - grid.lo)
    mid = 0.5 * (grid.hi + grid.lo)

    sigma = np.zeros(res)
    weighted = np.zeros(res + (3,))
    for b in range(spec.n_blobs):
        if spec.n_blobs == 1:
            center = mid.copy()
        else:
            center = mid + rng.uniform(-0.55, 0.55, 3) * half
        axes = rng.uniform(0.22, 0.45, 3) * half
        rot = _random_rotation(rng)
        base = rng.uniform(0.1, 0.95, 3)
        alt = rng.uniform(0.1, 0.95, 3)
        freq = rng.uniform(2.0, 4.0)
        local = (pts - center) @ rot / axes
        r2 = np.sum(local**2, axis=-1)
        dens = spec.density_scale * np.clip(1.0 - r2, 0.0, None) ** 2
        # two-tone stripe texture along a blob-local axis
        stripe = 0.5 + 0.5 * np.tanh(4.0 * np.sin(freq * math.pi * local[..., 0]))
        col = base * stripe[..., None] + alt * (1.0 - stripe[..., None])
        sigma += dens
        weighted += dens[..., None] * col
    occupied = sigma > 0
    color = np.full(res + (3,), 0.5)
    color[occupied] = weighted[occupied] / sigma[occupied, None]
    raw = np.full(res, EMPTY_RAW)
    raw[occupied] = softplus_inverse(sigma[occupied])
    return VoxelGrid(raw, np.clip(color, 0.0, 1.0), bbox)


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> PoseSE3:
    """Camera-to-world pose at ``center`` whose optical axis passes through ``target``."""
    center = np.asarray(center, dtype=float)
    forward = np.asarray(target, dtype=float) - center
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=float)
    if np.linalg.norm(np.cross(forward, up)) < 1e-6:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return PoseSE3(np.stack([right, down, forward], axis=1), center)


def sample_hemisphere_cameras(
    n: int, radius: float, seed: int = 0, z_range: tuple = (0.15, 0.85)
) -> list[PoseSE3]:
    """Stratified camera centers on the upper hemisphere, all looking at the origin.

    Heights are stratified uniformly in ``z/radius`` (area-uniform on the
    sphere) and azimuths in ``n`` equal sectors, with sectors assigned to
    heights by a golden-ratio stride so neighboring azimuths differ in height.
    """
    if n < 2:
        raise ValueError("need at least two cameras")
    rng = np.random.default_rng(seed)
    stride = max(1, round(n / ((1 + math.sqrt(5)) / 2)))
    while math.gcd(stride, n) != 1:
        stride += 1
    z_lo, z_hi = z_range
    poses = []
    for i in range(n):
        z = z_lo + (z_hi - z_lo) * (i + rng.uniform()) / n
        sector = (i * stride) % n
        phi = 2 * math.pi * (sector + rng.uniform(0.25, 0.75)) / n
        rxy = math.sqrt(max(0.0, 1.0 - z * z))
        c = radius * np.array([rxy * math.cos(phi), rxy * math.sin(phi), z])
        poses.append(look_at(c))
    return poses


def drop_poses(vs: ViewSet, fraction: float, seed: int = 0) -> ViewSet:
    """Mark ``ceil(fraction * n)`` randomly chosen views as unposed."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    n = len(vs)
    k = math.ceil(fraction * n - 1e-9)
    if k == 0:
        return vs
    rng = np.random.default_rng(seed)
    dropped = {vs.views[i].view_id for i in rng.choice(n, size=k, replace=False)}
    views = [replace(v, pose=None) if v.view_id in dropped else v for v in vs.views]
    return ViewSet(views, vs.intrinsics)
