"""Per-view pose-quality scoring from rendered vs reference images.

A view is scored by how many reliable ORB matches survive between its
render and its reference image, supplemented by a foreground-compensated
MSE.  Both are rank-normalized across views and mixed into one score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .orb import ORBParams, detect_keypoints, hamming_matrix

SUPERIOR = "superior"
INFERIOR = "inferior"


@dataclass(frozen=True)
class MatchParams:
    ratio: float = 0.75
    tau_fraction: float = 0.05  # coordinate filter, fraction of the image diagonal
    orb: ORBParams = ORBParams()

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must be in (0, 1]")
        if self.tau_fraction <= 0:
            raise ValueError("tau_fraction must be positive")

    def tau_px(self, shape) -> float:
        return self.tau_fraction * math.hypot(shape[0], shape[1])


@dataclass(frozen=True)
class MatchPair:
    ref_index: int
    rendered_index: int
    hamming: int
    offset: float


@dataclass
class MatchResult:
    """Surviving pairs plus the count after each filter stage."""

    pairs: list
    n_ref_keypoints: int
    n_rendered_keypoints: int
    after_ratio: int
    after_mutual: int

    @property
    def after_coordinate(self) -> int:
        return len(self.pairs)


def _ratio_best(dist: np.ndarray, ratio: float) -> np.ndarray:
    """Index of the best column per row, or -1 where the ratio test rejects it.

    A row with a single candidate has no second neighbour and is kept.
    """
    n, m = dist.shape
    best = np.full(n, -1)
    if n == 0 or m == 0:
        return best
    order = np.argsort(dist, axis=1, kind="stable")
    d1 = dist[np.arange(n), order[:, 0]].astype(float)
    if m == 1:
        return order[:, 0].copy()
    d2 = dist[np.arange(n), order[:, 1]].astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        keep = d1 < ratio * d2
    best[keep] = order[keep, 0]
    return best


def match_descriptors(ref_kps, ref_desc, ren_kps, ren_desc, tau_px: float,
                      ratio: float = 0.75) -> MatchResult:
    """Ratio test, mutual-best check, then the coordinate constraint.

    The ratio test is applied in both directions so that swapping the two
    inputs yields the same pair set.
    """
    dist = hamming_matrix(ref_desc, ren_desc)
    fwd = _ratio_best(dist, ratio)
    bwd = _ratio_best(dist.T, ratio)
    after_ratio = int(np.sum(fwd >= 0))
    pairs = []
    n_mutual = 0
    for i, j in enumerate(fwd):
        if j < 0 or bwd[j] != i:
            continue
        n_mutual += 1
        a, b = ref_kps[i], ren_kps[j]
        off = math.hypot(a.x - b.x, a.y - b.y)
        if off <= tau_px:
            pairs.append(MatchPair(i, int(j), int(dist[i, j]), off))
    return MatchResult(pairs, len(ref_kps), len(ren_kps), after_ratio, n_mutual)


def match_views(rendered, reference, params: MatchParams = MatchParams()) -> MatchResult:
    rendered = np.asarray(rendered)
    reference = np.asarray(reference)
    if rendered.shape != reference.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {reference.shape}")
    rk, rd = detect_keypoints(reference, params=params.orb)
    nk, nd = detect_keypoints(rendered, params=params.orb)
    return match_descriptors(rk, rd, nk, nd, params.tau_px(reference.shape), params.ratio)


def compensated_mse(rendered, reference, fg_mask) -> float:
    """MSE scaled by sqrt(N / N_f); plain MSE when the mask is empty."""
    a = np.asarray(rendered, dtype=float)
    b = np.asarray(reference, dtype=float)
    mask = np.asarray(fg_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask.shape != a.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    mse = float(np.mean((a - b) ** 2))
    n_f = int(mask.sum())
    if n_f == 0:
        return mse
    return math.sqrt(mask.size / n_f) * mse


def rank_normalize(values, higher_is_better: bool = True) -> np.ndarray:
    """Average ranks mapped onto [0, 1] with 1 for the best value; ties share a rank."""
    v = np.asarray(values, dtype=float)
    n = len(v)
    if n == 0:
        return v
    if n == 1:
        return np.ones(1)
    key = v if higher_is_better else -v
    order = np.argsort(key, kind="stable")
    ranks = np.empty(n)
    sorted_key = key[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_key[j + 1] == sorted_key[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j)
        i = j + 1
    return ranks / (n - 1)


@dataclass
class ViewScore:
    view_id: int
    kp_score: float
    mse_c: float
    combined: float
    label: str = SUPERIOR
    n_ref_keypoints: int = 0
    degenerate_mask: bool = False


@dataclass(frozen=True)
class ScoreParams:
    weight: float = 0.7  # keypoint share of the combined score
    k_min: int = 50
    match: MatchParams = MatchParams()

    def __post_init__(self):
        if not 0 <= self.weight <= 1:
            raise ValueError("weight must be in [0, 1]")
        if self.k_min < 0:
            raise ValueError("k_min must be >= 0")


@dataclass(frozen=True)
class RawScore:
    """Sub-criteria of one view before normalization across views."""

    view_id: int
    n_matches: int
    n_ref_keypoints: int
    mse_c: float
    degenerate_mask: bool = False

    @property
    def kp_score(self) -> float:
        return self.n_matches / max(self.n_ref_keypoints, 1)


def raw_score(view_id: int, rendered, reference, fg_mask,
              params: ScoreParams = ScoreParams()) -> RawScore:
    m = match_views(rendered, reference, params.match)
    mask = np.asarray(fg_mask, dtype=bool)
    return RawScore(view_id, m.after_coordinate, m.n_ref_keypoints,
                    compensated_mse(rendered, reference, mask), not mask.any())


def combined_score(raw: list, params: ScoreParams = ScoreParams()) -> list:
    """Rank-normalize both sub-criteria and mix them.

    Views whose reference has fewer than ``k_min`` keypoints use the MSE
    rank alone.
    """
    if not raw:
        return []
    kp = np.array([r.kp_score for r in raw])
    mse = np.array([r.mse_c for r in raw])
    kp_rank = rank_normalize(kp)
    mse_rank = rank_normalize(mse, higher_is_better=False)
    out = []
    for r, kr, mr in zip(raw, kp_rank, mse_rank):
        if r.n_ref_keypoints < params.k_min:
            comb = float(mr)
        else:
            comb = float(params.weight * kr + (1.0 - params.weight) * mr)
        out.append(ViewScore(r.view_id, r.kp_score, r.mse_c, comb,
                             n_ref_keypoints=r.n_ref_keypoints, degenerate_mask=r.degenerate_mask))
    return out


@dataclass(frozen=True)
class ClassifyPolicy:
    """Inferior iff combined < mean - n_sigma * std, lowest first, capped.

    ``mse_gate`` optionally also requires ``mse_c > mse_gate * median(mse_c)``,
    so a set of uniformly good views yields no inferior ones.
    """

    n_sigma: float = 1.0
    cap_fraction: float = 0.25
    mse_gate: float | None = None

    def __post_init__(self):
        if not 0 <= self.cap_fraction <= 1:
            raise ValueError("cap_fraction must be in [0, 1]")
        if self.mse_gate is not None and self.mse_gate <= 0:
            raise ValueError("mse_gate must be positive")


def classify(scores: list, policy: ClassifyPolicy = ClassifyPolicy()) -> list:
    """Label every score in place and return the list."""
    if len(scores) < 2:
        raise ValueError("classification needs at least 2 views")
    comb = np.array([s.combined for s in scores])
    thresh = comb.mean() - policy.n_sigma * comb.std()
    eligible = comb < thresh
    if policy.mse_gate is not None:
        mse = np.array([s.mse_c for s in scores])
        eligible &= mse > policy.mse_gate * np.median(mse)
    cap = math.ceil(policy.cap_fraction * len(scores) - 1e-9)
    idx = [i for i in np.lexsort(([s.view_id for s in scores], comb)) if eligible[i]][:cap]
    for s in scores:
        s.label = SUPERIOR
    for i in idx:
        scores[i].label = INFERIOR
    return scores


def inferior_ids(scores: list) -> list:
    return [s.view_id for s in scores if s.label == INFERIOR]


def score_views(grid, poses: dict, views, render_cfg, params: ScoreParams = ScoreParams(),
                policy: ClassifyPolicy | None = ClassifyPolicy()) -> list:
    """Render each view at its current pose (bin midpoints) and score it.

    ``views`` is a full-resolution ViewSet; reference masks come from the
    views, or from pixels that differ from the background when absent.
    Returns ViewScores in view order, classified unless ``policy`` is None.
    """
    from .render import render

    bg = np.asarray(render_cfg.background, dtype=float)
    raw = []
    for v in views:
        out = render(grid, poses[v.view_id], views.intrinsics, render_cfg)
        mask = v.mask if v.mask is not None else foreground_mask(v.image, bg)
        raw.append(raw_score(v.view_id, out.rgb, v.image, mask, params))
    scores = combined_score(raw, params)
    if policy is not None and len(scores) >= 2:
        classify(scores, policy)
    return scores


def foreground_mask(image, background, tol: float = 0.02) -> np.ndarray:
    """Pixels whose color differs from the background by more than ``tol`` in any channel."""
    img = np.asarray(image, dtype=float)
    return np.any(np.abs(img - np.asarray(background)) > tol, axis=-1)
