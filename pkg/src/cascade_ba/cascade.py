"""Cascade of compact BA stages with scoring, pruning and pose replacement.

Stages run coarse -> recursive (until the loop rule stops) -> fine.  After
the fine stage views are scored once more, those still inferior are
excluded, and a grid-only reconstruction is trained on the rest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .ba import BAOptions, ScheduleConfig, run_compact_ba
from .criterion import INFERIOR, ClassifyPolicy, ScoreParams, inferior_ids, score_views
from .problem import substream_seed
from .render import RenderConfig
from .replace import (ReplacementMemory, apply_replacement, find_neighbor, nms_filter,
                      replaced_pose)
from .scene import ViewSet

log = logging.getLogger(__name__)

COARSE, RECURSIVE, FINE = "coarse", "recursive", "fine"


@dataclass(frozen=True)
class CascadeConfig:
    coarse: ScheduleConfig = ScheduleConfig(2000, modulation=10.0)
    recursive: ScheduleConfig = ScheduleConfig(2000, modulation=3.0)
    fine: ScheduleConfig = ScheduleConfig(10000, modulation=1.0)
    # grid-only reconstruction at full resolution; None skips it
    final: ScheduleConfig | None = ScheduleConfig(3000, lr_pose_start=0.0, lr_pose_end=0.0)
    max_recursive_stages: int = 3
    loop_epsilon: float = 0.01
    nms_radius_deg: float = 30.0
    policy: ClassifyPolicy = ClassifyPolicy(mse_gate=5.0)
    score: ScoreParams = ScoreParams()
    score_render: RenderConfig = RenderConfig()
    downscale: int = 2
    ba: BAOptions = BAOptions()
    final_ba: BAOptions = BAOptions(grid_resolution=32)
    replacement: bool = True
    final_check: bool = True

    def __post_init__(self):
        if self.max_recursive_stages < 0:
            raise ValueError("max_recursive_stages must be >= 0")
        if self.loop_epsilon <= 0:
            raise ValueError("loop_epsilon must be positive")
        if self.downscale < 1:
            raise ValueError("downscale must be >= 1")
        if self.nms_radius_deg < 0:
            raise ValueError("nms_radius_deg must be >= 0")


@dataclass
class StageReport:
    index: int
    kind: str
    iterations: int
    mean_score: float
    min_score: float
    inferior_before_nms: int
    inferior_after_nms: int
    replacements: list = field(default_factory=list)
    loss_first: float = float("nan")
    loss_last: float = float("nan")
    warning: str = ""
    rotation_error: float | None = None
    translation_error: float | None = None

    def row(self) -> dict:
        return {
            "stage": self.index, "kind": self.kind, "iterations": self.iterations,
            "mean_score": self.mean_score, "min_score": self.min_score,
            "inferior_before_nms": self.inferior_before_nms,
            "inferior_after_nms": self.inferior_after_nms,
            "replacements": len(self.replacements),
            "loss_first": self.loss_first, "loss_last": self.loss_last,
            "rotation_error": "" if self.rotation_error is None else self.rotation_error,
            "translation_error": "" if self.translation_error is None else self.translation_error,
            "warning": self.warning,
        }


@dataclass
class PipelineResult:
    poses: dict            # final poses of the retained views
    excluded: list         # view ids removed by the final check
    grid: object           # final reconstruction (or the fine-stage grid)
    reports: list
    stage_inputs: list = field(default_factory=list)   # pose table entering each stage
    stage_outputs: list = field(default_factory=list)  # pose table after each stage
    final_scores: list = field(default_factory=list)
    traces: list = field(default_factory=list)  # (stage label, BAState) per BA run


def loop_detect(reports: list, cfg: CascadeConfig) -> bool:
    """True to run another recursive stage, False to stop."""
    rec = [r for r in reports if r.kind == RECURSIVE]
    if not rec:
        raise ValueError("loop_detect needs at least one recursive report")
    if rec[-1].inferior_after_nms == 0:
        return False
    if len(rec) >= 2 and rec[-1].mean_score - rec[-2].mean_score < cfg.loop_epsilon:
        return False
    return len(rec) < cfg.max_recursive_stages


def _score_and_replace(grid, poses, views, cfg, memory, report):
    scores = score_views(grid, poses, views, cfg.score_render, cfg.score, cfg.policy)
    comb = [s.combined for s in scores]
    report.mean_score = float(np.mean(comb))
    report.min_score = float(np.min(comb))
    report.inferior_before_nms = len(inferior_ids(scores))
    nms_filter(scores, poses, cfg.nms_radius_deg)
    bad = inferior_ids(scores)
    report.inferior_after_nms = len(bad)
    if not cfg.replacement or not bad:
        return poses, scores
    superior = {s.view_id: views[s.view_id].image for s in scores if s.label != INFERIOR}
    if not superior:
        report.warning = "no superior views; replacement skipped"
        log.warning("stage %d: %s", report.index, report.warning)
        return poses, scores
    for vid in bad:
        a = find_neighbor(vid, views[vid].image, superior, memory, cfg.score)
        if a is None:
            report.warning = f"candidates exhausted for view {vid}"
            continue
        poses = apply_replacement(poses, a, memory)
        report.replacements.append(a)
    return poses, scores


def run_cascade(views: ViewSet, init_poses: dict, cfg: CascadeConfig = CascadeConfig(),
                seed: int = 0, gt_poses: dict | None = None,
                memory: ReplacementMemory | None = None) -> PipelineResult:
    """Cascaded BA over ``views`` starting from ``init_poses``.

    ``gt_poses`` only adds error columns to the stage reports.  ``memory``
    carries assignments already tried, e.g. by :func:`init_missing_poses`.
    """
    missing = [v for v in views.ids if init_poses.get(v) is None]
    if missing:
        raise ValueError(f"views without an initial pose: {missing}; run init_missing_poses first")
    small = views.downscaled(cfg.downscale) if cfg.downscale > 1 else views
    poses = {v: init_poses[v] for v in views.ids}
    memory = ReplacementMemory() if memory is None else memory
    result = PipelineResult({}, [], None, [])

    def stage(kind, sched):
        nonlocal poses
        idx = len(result.reports)
        result.stage_inputs.append(dict(poses))
        st = run_compact_ba(small, poses, sched, seed=substream_seed(seed, f"rays/{idx}"), options=cfg.ba)
        poses = st.refined_poses()
        result.traces.append((f"{idx}-{kind}", st))
        rep = StageReport(idx, kind, sched.iterations, float("nan"), float("nan"), 0, 0,
                          loss_first=st.loss_trace[0], loss_last=st.loss_trace[-1])
        if kind != FINE:
            poses, _ = _score_and_replace(st.grid, poses, views, cfg, memory, rep)
        if gt_poses is not None:
            _attach_errors(rep, poses, gt_poses)
        result.reports.append(rep)
        result.stage_outputs.append(dict(poses))
        log.info("stage %d (%s): loss %.3g, inferior %d -> %d, %d replaced", idx, kind,
                 rep.loss_last, rep.inferior_before_nms, rep.inferior_after_nms, len(rep.replacements))
        return st

    stage(COARSE, cfg.coarse)
    if cfg.max_recursive_stages > 0:
        while True:
            stage(RECURSIVE, cfg.recursive)
            if not loop_detect(result.reports, cfg):
                break
    fine = stage(FINE, cfg.fine)

    excluded = []
    if cfg.final_check:
        scores = score_views(fine.grid, poses, views, cfg.score_render, cfg.score, cfg.policy)
        fine_rep = result.reports[-1]
        comb = [s.combined for s in scores]
        fine_rep.mean_score, fine_rep.min_score = float(np.mean(comb)), float(np.min(comb))
        fine_rep.inferior_before_nms = len(inferior_ids(scores))
        nms_filter(scores, poses, cfg.nms_radius_deg)
        excluded = inferior_ids(scores)
        fine_rep.inferior_after_nms = len(excluded)
        result.final_scores = scores
    kept = [v for v in views.ids if v not in excluded]
    result.excluded = excluded
    result.poses = {v: poses[v] for v in kept}
    if cfg.final is not None and kept:
        st = run_compact_ba(views.subset(kept), result.poses, cfg.final,
                            seed=substream_seed(seed, "rays/final"), options=cfg.final_ba)
        result.traces.append(("final", st))
        result.grid = st.grid
    else:
        result.grid = fine.grid
    return result


def _attach_errors(rep: StageReport, poses: dict, gt: dict):
    from .evaluate import AlignmentError, pose_errors

    try:
        e = pose_errors(poses, gt)
    except AlignmentError:
        return
    rep.rotation_error = e.mean_rotation
    rep.translation_error = e.mean_translation


def init_missing_poses(views: ViewSet, params: ScoreParams = ScoreParams(),
                       memory: ReplacementMemory | None = None) -> ViewSet:
    """Give each unposed view the pose of its most similar posed view.

    Similarity is the rotation-augmented reference-image score used for
    replacement; the matched in-plane roll is composed into the pose.  Each
    choice is recorded in ``memory`` when given, so a later replacement of
    the same view tries a different neighbour.
    """
    missing = views.missing()
    if not missing:
        return views
    posed = {v.view_id: v for v in views if v.pose is not None}
    if not posed:
        raise ValueError("at least one view must have a pose")
    candidates = {vid: v.image for vid, v in posed.items()}
    new = {}
    for vid in missing:
        a = find_neighbor(vid, views[vid].image, candidates, ReplacementMemory(), params)
        new[vid] = replaced_pose(posed[a.source].pose, a.rotation)
        if memory is not None:
            memory.record(vid, a.source, a.rotation)
    return views.with_poses(new)


def single_stage(views: ViewSet, init_poses: dict, iterations: int, cfg: CascadeConfig = CascadeConfig(),
                 seed: int = 0) -> dict:
    """One compact BA with the cascade's total budget (comparison baseline)."""
    small = views.downscaled(cfg.downscale) if cfg.downscale > 1 else views
    sched = replace(cfg.fine, iterations=iterations)
    st = run_compact_ba(small, init_poses, sched, seed=substream_seed(seed, "rays/0"), options=cfg.ba)
    return st.refined_poses()
