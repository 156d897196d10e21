"""Single-scale ORB: FAST-9 corners, Harris ranking, steered BRIEF.

Everything works on float images in [0, 1].  The descriptor patch is
31x31, so keypoints are kept at least ``BORDER`` pixels from the edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
PATCH = 31
BORDER = PATCH // 2
N_BITS = 256
HARRIS_K = 0.04
PATTERN_SEED = 0x0B5

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dy, dx)
CIRCLE = np.array([
    (-3, 0), (-3, 1), (-2, 2), (-1, 3), (0, 3), (1, 3), (2, 2), (3, 1),
    (3, 0), (3, -1), (2, -2), (1, -3), (0, -3), (-1, -3), (-2, -2), (-3, -1),
])


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    orientation: float
    response: float


@dataclass(frozen=True)
class ORBParams:
    max_keypoints: int = 500
    fast_threshold: float = 0.05
    arc_length: int = 9
    harris_block: int = 7

    def __post_init__(self):
        if self.max_keypoints < 1:
            raise ValueError("max_keypoints must be >= 1")
        if not 0 < self.fast_threshold < 1:
            raise ValueError("fast_threshold must be in (0, 1)")
        if not 1 <= self.arc_length <= 16:
            raise ValueError("arc_length must be in [1, 16]")


def to_gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.ndim == 3:
        return img[..., :3] @ LUMA
    if img.ndim != 2:
        raise ValueError(f"expected an HxW or HxWx3 image, got shape {img.shape}")
    return img


def _make_pattern() -> np.ndarray:
    """256 test-point pairs (dy1, dx1, dy2, dx2), isotropic Gaussian, inside radius 13."""
    rng = np.random.default_rng(PATTERN_SEED)
    pairs = []
    while len(pairs) < N_BITS:
        p = rng.normal(0.0, PATCH / 5.0, 4)
        if np.hypot(p[0], p[1]) <= 13 and np.hypot(p[2], p[3]) <= 13 and np.any(np.round(p[:2]) != np.round(p[2:])):
            pairs.append(p)
    return np.array(pairs)


PATTERN = _make_pattern()

_yy, _xx = np.mgrid[-BORDER:BORDER + 1, -BORDER:BORDER + 1]
_DISC = (_yy**2 + _xx**2) <= BORDER**2


def fast_corners(gray: np.ndarray, threshold: float, arc: int = 9) -> np.ndarray:
    """Boolean map of FAST corners: ``arc`` contiguous circle pixels all brighter
    than ``p + threshold`` or all darker than ``p - threshold``.  Pixels within 3 of
    the border are never corners."""
    h, w = gray.shape
    out = np.zeros((h, w), dtype=bool)
    if h < 7 or w < 7:
        return out
    core = gray[3:h - 3, 3:w - 3]
    ring = np.stack([gray[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] for dy, dx in CIRCLE])
    for mask in (ring > core + threshold, ring < core - threshold):
        wrapped = np.concatenate([mask, mask[: arc - 1]])
        run = np.zeros(core.shape, dtype=bool)
        for s in range(16):
            run |= np.all(wrapped[s:s + arc], axis=0)
        out[3:h - 3, 3:w - 3] |= run
    return out


def harris_response(gray: np.ndarray, block: int = 7, k: float = HARRIS_K) -> np.ndarray:
    ix = ndimage.sobel(gray, axis=1, mode="nearest") / 8.0
    iy = ndimage.sobel(gray, axis=0, mode="nearest") / 8.0
    box = lambda a: ndimage.uniform_filter(a, block, mode="nearest")
    sxx, syy, sxy = box(ix * ix), box(iy * iy), box(ix * iy)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _refine(resp: np.ndarray, y: int, x: int) -> tuple[float, float]:
    """Quadratic peak fit along each axis, clamped to half a pixel."""
    def offset(m, c, p):
        den = m - 2 * c + p
        return 0.0 if den >= 0 else float(np.clip(0.5 * (m - p) / den, -0.5, 0.5))

    c = resp[y, x]
    return x + offset(resp[y, x - 1], c, resp[y, x + 1]), y + offset(resp[y - 1, x], c, resp[y + 1, x])


def _orientation(gray: np.ndarray, y: int, x: int) -> float:
    patch = gray[y - BORDER:y + BORDER + 1, x - BORDER:x + BORDER + 1] * _DISC
    return float(np.arctan2(np.sum(_yy * patch), np.sum(_xx * patch)))


def _describe(smooth: np.ndarray, y: int, x: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    # rotate (dx, dy) by angle; image y points down, which the centroid angle already uses
    dy1, dx1, dy2, dx2 = PATTERN.T
    y1 = np.rint(y + s * dx1 + c * dy1).astype(int)
    x1 = np.rint(x + c * dx1 - s * dy1).astype(int)
    y2 = np.rint(y + s * dx2 + c * dy2).astype(int)
    x2 = np.rint(x + c * dx2 - s * dy2).astype(int)
    return np.packbits(smooth[y1, x1] < smooth[y2, x2])


def detect_keypoints(image, max_kp: int | None = None, params: ORBParams = ORBParams()):
    """Oriented FAST keypoints with rotated-BRIEF descriptors.

    Returns ``(keypoints, descriptors)``, keypoints sorted by descending Harris
    response and descriptors as a uint8 array of shape (n, 32).  Images too
    small for the 31x31 patch give an empty result.
    """
    gray = to_gray(image)
    limit = params.max_keypoints if max_kp is None else max_kp
    empty = ([], np.zeros((0, N_BITS // 8), dtype=np.uint8))
    h, w = gray.shape
    if h < PATCH or w < PATCH or limit < 1:
        return empty
    corners = fast_corners(gray, params.fast_threshold, params.arc_length)
    corners[:BORDER] = corners[h - BORDER:] = False
    corners[:, :BORDER] = corners[:, w - BORDER:] = False
    if not corners.any():
        return empty
    resp = harris_response(gray, params.harris_block)
    masked = np.where(corners, resp, -np.inf)
    peak = masked == ndimage.maximum_filter(masked, size=3, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero(corners & peak)
    # stable order: response descending, then row-major position
    order = np.lexsort((xs, ys, -resp[ys, xs]))[:limit]
    smooth = ndimage.gaussian_filter(gray, 2.0, mode="nearest")
    kps, descs = [], []
    for y, x in zip(ys[order], xs[order]):
        angle = _orientation(gray, y, x)
        fx, fy = _refine(resp, y, x)
        kps.append(Keypoint(fx, fy, angle, float(resp[y, x])))
        descs.append(_describe(smooth, y, x, angle))
    return kps, np.array(descs, dtype=np.uint8)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between packed descriptor rows."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int64)
    return np.bitwise_count(a[:, None, :] ^ b[None, :, :]).sum(axis=-1, dtype=np.int64)
