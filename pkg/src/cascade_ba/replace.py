"""Pruning of inferior views and neighbour-based pose replacement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .criterion import INFERIOR, SUPERIOR, ScoreParams, match_views, rank_normalize
from .se3 import PoseSE3, rot_z

ROTATIONS = (0, 90, 180, 270)


def center_angle(a, b) -> float:
    """Angle in degrees between two camera centers as seen from the origin."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    c = float(np.dot(a, b) / (na * nb))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def nms_filter(scores: list, poses: dict, radius_deg: float = 30.0) -> list:
    """Keep an inferior view only if it is the lowest-scoring inferior view
    within ``radius_deg`` of its camera center; relabel the rest superior.

    Ties go to the lower view id.  Labels are updated in place.
    """
    inferior = [s for s in scores if s.label == INFERIOR]
    keep = set()
    for s in inferior:
        c = poses[s.view_id].t
        beaten = any(
            (o.combined, o.view_id) < (s.combined, s.view_id)
            for o in inferior
            if o.view_id != s.view_id and center_angle(c, poses[o.view_id].t) <= radius_deg
        )
        if not beaten:
            keep.add(s.view_id)
    for s in inferior:
        if s.view_id not in keep:
            s.label = SUPERIOR
    return scores


@dataclass
class ReplacementMemory:
    used: dict = field(default_factory=dict)  # target -> {(source, rotation)}

    def contains(self, target: int, source: int, rotation: int) -> bool:
        return (source, rotation) in self.used.get(target, set())

    def record(self, target: int, source: int, rotation: int):
        self.used.setdefault(target, set()).add((source, rotation))

    def __len__(self):
        return sum(len(v) for v in self.used.values())


@dataclass(frozen=True)
class ReplacementAssignment:
    target: int
    source: int
    rotation: int  # degrees, one of ROTATIONS
    similarity: float


def rotate_image(image, rotation: int) -> np.ndarray:
    """In-plane raster rotation by a multiple of 90 degrees (counter-clockwise on screen)."""
    if rotation % 90:
        raise ValueError("rotation must be a multiple of 90 degrees")
    return np.rot90(np.asarray(image), k=(rotation // 90) % 4, axes=(0, 1))


def pair_similarities(target_image, candidates: list, params: ScoreParams = ScoreParams()):
    """Combined similarity of ``target_image`` to each (view_id, image, rotation).

    Keypoint match fraction and image MSE are rank-normalized over all the
    candidate pairs and mixed as in view scoring; the MSE rank alone is used
    when the target has fewer than ``k_min`` keypoints.
    """
    if not candidates:
        return []
    target = np.asarray(target_image, dtype=float)
    kp, mse, n_ref = [], [], 0
    for _, image, rotation in candidates:
        img = rotate_image(image, rotation)
        if img.shape != target.shape:
            raise ValueError("rotated candidate does not match the target shape; images must be square")
        m = match_views(img, target, params.match)
        n_ref = m.n_ref_keypoints
        kp.append(m.after_coordinate / max(m.n_ref_keypoints, 1))
        mse.append(float(np.mean((img - target) ** 2)))
    mse_rank = rank_normalize(mse, higher_is_better=False)
    if n_ref < params.k_min:
        return [float(r) for r in mse_rank]
    kp_rank = rank_normalize(kp)
    return [float(params.weight * a + (1.0 - params.weight) * b) for a, b in zip(kp_rank, mse_rank)]


def find_neighbor(target_id: int, target_image, candidates: dict, memory: ReplacementMemory,
                  params: ScoreParams = ScoreParams()) -> ReplacementAssignment | None:
    """Most similar (candidate, rotation) not yet used for this target.

    ``candidates`` maps view id to reference image.  Returns None when every
    pair is exhausted.
    """
    pairs = [(vid, img, rot) for vid, img in sorted(candidates.items()) if vid != target_id
             for rot in ROTATIONS]
    sims = pair_similarities(target_image, pairs, params)
    best = None
    for (vid, _, rot), sim in zip(pairs, sims):
        if memory.contains(target_id, vid, rot):
            continue
        if best is None or sim > best.similarity:
            best = ReplacementAssignment(target_id, vid, rot, sim)
    return best


def replaced_pose(source: PoseSE3, rotation: int) -> PoseSE3:
    """Source pose rolled about its optical axis; the center is unchanged.

    Rolling by ``rotation`` makes the camera see the source image rotated by
    the same angle as :func:`rotate_image`.
    """
    if rotation % 360 == 0:
        return source
    return PoseSE3(source.R @ rot_z(math.radians(rotation)), source.t)


def apply_replacement(poses: dict, assignment: ReplacementAssignment,
                      memory: ReplacementMemory) -> dict:
    """New pose table with the target overwritten; the assignment is recorded."""
    out = dict(poses)
    out[assignment.target] = replaced_pose(poses[assignment.source], assignment.rotation)
    memory.record(assignment.target, assignment.source, assignment.rotation)
    return out
