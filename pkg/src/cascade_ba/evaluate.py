"""Ground-truth pose and image-quality metrics.

Ground-truth poses enter the package only through this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .se3 import PoseSE3, rotation_geodesic

PSNR_CAP = 99.0


class AlignmentError(ValueError):
    """Camera centers are too few or degenerate for a similarity fit."""


@dataclass(frozen=True)
class AlignmentTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply_point(self, p) -> np.ndarray:
        return self.scale * self.rotation @ np.asarray(p) + self.translation

    def apply_pose(self, pose: PoseSE3) -> PoseSE3:
        return PoseSE3(self.rotation @ pose.R, self.apply_point(pose.t))


def procrustes_align(est: dict, gt: dict) -> AlignmentTransform:
    """Similarity transform taking estimated camera centers onto ground truth.

    Closed-form least squares (Umeyama) over views present in both maps.
    """
    ids = [k for k in est if k in gt and est[k] is not None and gt[k] is not None]
    if len(ids) < 3:
        raise AlignmentError("need at least 3 matched camera centers")
    X = np.stack([est[k].t for k in ids])
    Y = np.stack([gt[k].t for k in ids])
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    var_x = np.mean(np.sum(Xc**2, axis=1))
    cov = Yc.T @ Xc / len(ids)
    U, D, Vt = np.linalg.svd(cov)
    if var_x < 1e-12 or D[1] < 1e-9 * max(D[0], 1e-300):
        raise AlignmentError("camera centers are collinear or coincident")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_x)
    t = my - s * R @ mx
    return AlignmentTransform(s, R, t)


@dataclass
class PoseErrorReport:
    view_ids: list
    rotation_deg: np.ndarray
    translation: np.ndarray  # scene units x 100

    @property
    def mean_rotation(self) -> float:
        return float(np.mean(self.rotation_deg))

    @property
    def mean_translation(self) -> float:
        return float(np.mean(self.translation))

    def as_dict(self) -> dict:
        return {v: (float(r), float(t)) for v, r, t in zip(self.view_ids, self.rotation_deg, self.translation)}


def pose_errors(est: dict, gt: dict, alignment: AlignmentTransform | None = None,
                ids=None) -> PoseErrorReport:
    """Per-view rotation error (degrees) and center error (x100) after alignment."""
    if alignment is None:
        alignment = procrustes_align(est, gt)
    if ids is None:
        ids = [k for k in est if k in gt and est[k] is not None]
    rot, trans = [], []
    for k in ids:
        aligned = alignment.apply_pose(est[k])
        rot.append(math.degrees(rotation_geodesic(aligned.R, gt[k].R)))
        trans.append(100.0 * float(np.linalg.norm(aligned.t - gt[k].t)))
    return PoseErrorReport(list(ids), np.array(rot), np.array(trans))


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a, b, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-window SSIM (11x11, dynamic range 1), averaged over channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = k1**2, k2**2
    # truncate=5/sigma gives an 11-tap kernel
    blur = lambda x: gaussian_filter(x, sigma, truncate=5.0 / sigma, mode="reflect")
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


@dataclass
class ImageQualityReport:
    view_ids: list
    psnr: np.ndarray
    ssim: np.ndarray

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


def image_quality(rendered: dict, reference: dict) -> ImageQualityReport:
    ids = [k for k in rendered if k in reference]
    return ImageQualityReport(
        ids,
        np.array([psnr(rendered[k], reference[k]) for k in ids]),
        np.array([ssim(rendered[k], reference[k]) for k in ids]),
    )
