"""Rigid-body pose algebra.

Poses are camera-to-world: ``R`` holds the camera axes (OpenCV convention,
x right, y down, z forward) as columns expressed in world coordinates and
``t`` is the camera center.  Twists are 6-vectors ordered ``(rho, omega)``
where ``rho`` is the translational part and ``omega`` an axis-angle rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Below this angle the trigonometric coefficients switch to Taylor series.
SMALL_ANGLE = 1e-3


@dataclass(frozen=True)
class PoseSE3:
    R: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> PoseSE3:
        """Build from a 3x4 or 4x4 ``[R|t]`` matrix."""
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        """Return the 3x4 ``[R|t]`` matrix."""
        return np.hstack([self.R, self.t[:, None]])

    @property
    def center(self) -> np.ndarray:
        return self.t

    @property
    def optical_axis(self) -> np.ndarray:
        return self.R[:, 2]

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.R
        return bool(
            np.all(np.isfinite(R))
            and np.all(np.isfinite(self.t))
            and np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) <= tol
        )


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _coefficients(theta: float) -> tuple[float, float, float]:
    """Return sin(θ)/θ, (1-cos θ)/θ², (θ-sin θ)/θ³."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        t4 = t2 * t2
        return (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
        )
    s = math.sin(theta)
    half = math.sin(0.5 * theta)
    return s / theta, 2.0 * half * half / theta**2, (theta - s) / theta**3


def so3_exp(omega) -> np.ndarray:
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _coefficients(theta)
    K = skew(omega)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(vee))
    c = float(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0))
    theta = math.atan2(s, c)
    if theta < SMALL_ANGLE:
        # vee = sin(θ)/θ · ω
        return vee / (1.0 - theta**2 / 6.0 + theta**4 / 120.0)
    if math.pi - theta > 1e-6:
        return vee * (theta / s)
    # θ ≈ π: axis from the symmetric part, sign from the (tiny) skew part
    B = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ vee < 0:
        axis = -axis
    return theta * axis


def left_jacobian(omega) -> np.ndarray:
    """The matrix V mapping ``rho`` to the translation of ``exp_map``."""
    omega = np.asarray(omega, dtype=float)
    _, b, c = _coefficients(float(np.linalg.norm(omega)))
    K = skew(omega)
    return np.eye(3) + b * K + c * (K @ K)


def right_jacobian(omega) -> np.ndarray:
    """Right Jacobian of SO(3): ``exp(w + d) ≈ exp(w) exp(J_r(w) d)``."""
    omega = np.asarray(omega, dtype=float)
    _, b, c = _coefficients(float(np.linalg.norm(omega)))
    K = skew(omega)
    return np.eye(3) - b * K + c * (K @ K)


def exp_map(xi) -> PoseSE3:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, omega = xi[:3], xi[3:]
    return PoseSE3(so3_exp(omega), left_jacobian(omega) @ rho)


def log_map(pose: PoseSE3) -> np.ndarray:
    omega = so3_log(pose.R)
    rho = np.linalg.solve(left_jacobian(omega), pose.t)
    return np.concatenate([rho, omega])


def rotation_angle(R) -> float:
    # atan2 keeps full precision near 0 and pi, where acos of the trace does not
    R = np.asarray(R)
    s = 0.5 * math.hypot(R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1])
    return math.atan2(s, 0.5 * (np.trace(R) - 1.0))


def rotation_geodesic(r1, r2) -> float:
    """Angle in radians of ``r1ᵀ r2``."""
    return rotation_angle(np.asarray(r1).T @ np.asarray(r2))


def perturb_pose(p: PoseSE3, n: PoseSE3) -> PoseSE3:
    """Apply a noise transform: rotations multiply, translations add."""
    return PoseSE3(p.R @ n.R, p.t + n.t)


def refine_pose(p_tilde: PoseSE3, p_r: PoseSE3) -> PoseSE3:
    """Apply a refinement transform with the same additive-translation rule."""
    return PoseSE3(p_tilde.R @ p_r.R, p_tilde.t + p_r.t)


def twist_to_refinement(xi) -> PoseSE3:
    """Refinement transform used during optimization: ``[exp(omega) | rho]``.

    Translation is taken as ``rho`` directly so the trainable parameters act
    additively on the camera center.
    """
    xi = np.asarray(xi, dtype=float).reshape(6)
    return PoseSE3(so3_exp(xi[3:]), xi[:3])


@dataclass(frozen=True)
class NoiseConfig:
    coefficient: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if not self.coefficient >= 0:
            raise ValueError(f"noise coefficient must be >= 0, got {self.coefficient}")


class NoiseSampler:
    """Seeded source of ``coefficient * N(0, I_6)`` twists."""

    def __init__(self, cfg: NoiseConfig):
        self.cfg = cfg
        self._rng = np.random.default_rng(cfg.seed)

    def sample(self) -> np.ndarray:
        return self.cfg.coefficient * self._rng.standard_normal(6)

    def sample_many(self, n: int) -> np.ndarray:
        return self.cfg.coefficient * self._rng.standard_normal((n, 6))


def sample_noise(cfg: NoiseConfig) -> np.ndarray:
    """One noise twist drawn from a fresh generator seeded by ``cfg.seed``."""
    return NoiseSampler(cfg).sample()


def rot_x(angle: float) -> np.ndarray:
    return so3_exp([angle, 0.0, 0.0])


def rot_y(angle: float) -> np.ndarray:
    return so3_exp([0.0, angle, 0.0])


def rot_z(angle: float) -> np.ndarray:
    return so3_exp([0.0, 0.0, angle])
