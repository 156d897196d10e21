"""Command-line entry point: ``cascade-ba <command> ...``.

Exit status is 0 on success, 1 for configuration or input errors and 2 for
failures while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config, load_manifest, to_dict
from .io import (FormatError, load_grid, load_poses, load_viewset, save_grid, save_png, save_poses,
                 save_viewset, write_csv)

log = logging.getLogger("cascade_ba")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# how each unresolved modelling choice was settled; recorded in every manifest
OPEN_QUESTIONS = {
    "criterion_normalization": "rank",
    "inferior_threshold": "mean - n_sigma * std, capped at cap_fraction",
    "mse_gate": "inferior also requires mse_c > gate * median(mse_c)",
    "nms_distance": "angle between camera centers about the origin",
    "final_check": "exclude views still inferior after the fine stage",
    "missing_pose_init": "pose of the most similar posed view, with matched roll",
    "alignment": "similarity (Umeyama) on camera centers",
    "final_reconstruction": "grid-only BA at full resolution on retained views",
}


def _check_exists(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise ConfigError(f"no such file or directory: {p}")


def _intrinsics_from(args):
    from .scene import CameraIntrinsics

    if getattr(args, "views", None):
        return load_viewset(args.views).intrinsics
    return CameraIntrinsics.from_fov(args.width, args.height, args.fov)


# ---------------------------------------------------------------- commands

def cmd_synthesize_scene(args) -> int:
    from .problem import synthesize

    cfg = _resolve(args)
    if cfg.scene is None:
        raise ConfigError("synthesize-scene needs a [scene] table, not a dataset")
    out = Path(cfg.output)
    grid, views = synthesize(cfg.seed, cfg.rig_params(), **cfg.scene)
    save_viewset(out, views)
    save_grid(out / "scene.grid", grid)
    save_poses(out / "gt_poses.json", views.poses())
    _write_manifest(out, cfg, "synthesize-scene")
    print(f"wrote {len(views)} views to {out}")
    return EXIT_OK


def cmd_perturb_poses(args) -> int:
    from .problem import perturb_all

    _check_exists(args.poses)
    if args.coefficient < 0:
        raise ConfigError("--coefficient must be >= 0")
    poses = load_poses(args.poses)
    save_poses(args.out, perturb_all(poses, args.coefficient, args.seed))
    print(f"wrote {len(poses)} poses to {args.out}")
    return EXIT_OK


def cmd_drop_poses(args) -> int:
    from .problem import drop

    _check_exists(args.views)
    if not 0 <= args.fraction < 1:
        raise ConfigError("--fraction must be in [0, 1)")
    views = drop(load_viewset(args.views), args.fraction, args.seed)
    save_viewset(args.out, views)
    print("dropped views:", " ".join(str(v) for v in views.missing()) or "none")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, cfg, "run")
    t0 = time.time()
    summary = run_pipeline(cfg, out, figures=not args.no_figures)
    summary["seconds"] = round(time.time() - t0, 1)
    for k, v in summary.items():
        print(f"{k},{v}")
    return EXIT_OK


def cmd_score_views(args) -> int:
    from .criterion import ClassifyPolicy, score_views
    from .render import RenderConfig

    _check_exists(args.grid, args.poses, args.views)
    grid, poses, views = load_grid(args.grid), load_poses(args.poses), load_viewset(args.views)
    missing = [v for v in views.ids if poses.get(v) is None]
    if missing:
        raise ConfigError(f"{args.poses}: no pose for views {missing}")
    policy = ClassifyPolicy(mse_gate=args.mse_gate if args.mse_gate > 0 else None)
    scores = score_views(grid, poses, views, RenderConfig(samples_per_ray=args.samples), policy=policy)
    rows = [_score_row(s) for s in scores]
    write_csv(args.out, rows)
    _print_rows(rows)
    return EXIT_OK


def cmd_render(args) -> int:
    from .render import RenderConfig, render

    _check_exists(args.grid, args.poses, getattr(args, "views", None))
    grid, poses = load_grid(args.grid), load_poses(args.poses)
    intr = _intrinsics_from(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = RenderConfig(samples_per_ray=args.samples)
    n = 0
    for vid, pose in sorted(poses.items()):
        if pose is None:
            continue
        save_png(out / f"view_{vid:04d}.png", render(grid, pose, intr, cfg).rgb)
        n += 1
    print(f"rendered {n} views to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluate import image_quality, pose_errors
    from .render import RenderConfig, render

    _check_exists(args.est, args.gt, args.views, args.grid)
    est = {k: v for k, v in load_poses(args.est).items() if v is not None}
    gt = load_poses(args.gt)
    err = pose_errors(est, gt)
    rows = [{"metric": "mean_rotation_deg", "value": err.mean_rotation},
            {"metric": "mean_translation_x100", "value": err.mean_translation},
            {"metric": "n_views", "value": len(err.view_ids)}]
    if args.views and args.grid:
        views, grid = load_viewset(args.views), load_grid(args.grid)
        cfg = RenderConfig(samples_per_ray=args.samples)
        ids = [v for v in views.ids if v in est]
        rendered = {v: render(grid, est[v], views.intrinsics, cfg).rgb for v in ids}
        q = image_quality(rendered, {v: views[v].image for v in ids})
        rows += [{"metric": "mean_psnr", "value": q.mean_psnr}, {"metric": "mean_ssim", "value": q.mean_ssim}]
    write_csv(args.out, rows)
    _print_rows(rows)
    return EXIT_OK


# ---------------------------------------------------------------- pipeline

def run_pipeline(cfg: RunConfig, out: Path, figures: bool = True) -> dict:
    """Build or load the problem, run the cascade and write every artifact."""
    from . import plotting
    from .cascade import init_missing_poses, run_cascade
    from .evaluate import AlignmentError, image_quality, pose_errors
    from .problem import build_problem, drop, perturb_all
    from .render import render
    from .replace import ReplacementMemory
    from .scene import ViewSet

    cc = cfg.cascade_config()
    if cfg.scene is not None:
        pb = build_problem(cfg.seed, cfg.noise_coefficient, cfg.drop_fraction, cfg.rig_params(),
                           **cfg.scene)
        views, gt, init = pb.views, pb.gt, pb.init
        save_grid(out / "scene.grid", pb.grid)
    else:
        views = _load_dataset(cfg)
        given = views.poses()
        gt = given if all(p is not None for p in given.values()) else None
        if cfg.init_poses is not None:
            init = load_poses(cfg.init_poses)
            unknown = sorted(set(init) - set(views.ids))
            if unknown:
                raise ConfigError(f"init_poses: unknown view ids {unknown}")
            init = {v: init.get(v) for v in views.ids}
        else:
            init = perturb_all(given, cfg.noise_coefficient, cfg.seed)
            if cfg.drop_fraction > 0:
                kept = drop(views, cfg.drop_fraction, cfg.seed).poses()
                init = {v: init[v] if kept[v] is not None else None for v in init}
    if gt is not None:
        save_poses(out / "gt_poses.json", gt)
    save_poses(out / "init_poses.json", init)

    observed: ViewSet = views.with_poses(init)
    dropped = observed.missing()
    memory = ReplacementMemory()
    if dropped:
        observed = init_missing_poses(observed, cc.score, memory)
        save_poses(out / "init_filled_poses.json", observed.poses())
    res = run_cascade(observed, observed.poses(), cc, seed=cfg.seed, gt_poses=gt, memory=memory)

    stages = out / "stages"
    stages.mkdir(exist_ok=True)
    for rep, pin, pout in zip(res.reports, res.stage_inputs, res.stage_outputs):
        save_poses(stages / f"stage_{rep.index:02d}_{rep.kind}_in.json", pin)
        save_poses(stages / f"stage_{rep.index:02d}_{rep.kind}_out.json", pout)
    write_csv(out / "stage_reports.csv", [r.row() for r in res.reports])
    write_csv(out / "assignments.csv",
              [{"stage": r.index, "target": a.target, "source": a.source, "rotation": a.rotation,
                "similarity": a.similarity} for r in res.reports for a in r.replacements],
              ["stage", "target", "source", "rotation", "similarity"])
    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    for label, st in res.traces:
        write_csv(traces / f"loss_{label}.csv",
                  [{"iteration": i, "loss": l, "lr_pose": p, "lr_grid": g}
                   for i, (l, p, g) in enumerate(zip(st.loss_trace, st.lr_pose_trace, st.lr_grid_trace))],
                  ["iteration", "loss", "lr_pose", "lr_grid"])
    save_poses(out / "final_poses.json", res.poses)
    (out / "excluded.json").write_text(json.dumps({"excluded": [int(v) for v in res.excluded]}))
    if res.final_scores:
        write_csv(out / "final_scores.csv", [_score_row(s) for s in res.final_scores])
    save_grid(out / "reconstruction.grid", res.grid)

    renders = out / "renders"
    renders.mkdir(exist_ok=True)
    rendered = {}
    for vid, pose in sorted(res.poses.items()):
        rendered[vid] = render(res.grid, pose, views.intrinsics, cfg.render.config()).rgb
        save_png(renders / f"view_{vid:04d}.png", rendered[vid])

    summary = {"views": len(views), "dropped": len(dropped), "excluded": len(res.excluded),
               "stages": len(res.reports),
               "replacements": sum(len(r.replacements) for r in res.reports)}
    metrics = []
    per_view = []
    if gt is not None:
        try:
            err = pose_errors(res.poses, gt)
        except AlignmentError as exc:
            log.warning("pose errors unavailable: %s", exc)
        else:
            metrics += [("mean_rotation_deg", err.mean_rotation), ("mean_translation_x100", err.mean_translation)]
            per_view = [{"view_id": v, "rotation_deg": r, "translation_x100": t, "dropped": int(v in dropped)}
                        for v, (r, t) in err.as_dict().items()]
    q = image_quality(rendered, {v: views[v].image for v in rendered})
    metrics += [("mean_psnr", q.mean_psnr), ("mean_ssim", q.mean_ssim)]
    for row, p, s in zip(per_view, q.psnr, q.ssim):
        row["psnr"], row["ssim"] = float(p), float(s)
    write_csv(out / "metrics.csv", [{"metric": k, "value": v} for k, v in metrics], ["metric", "value"])
    if per_view:
        write_csv(out / "per_view.csv", per_view)
    summary.update(metrics)

    if figures:
        fig = out / "figures"
        fig.mkdir(exist_ok=True)
        plotting.loss_curves(res.traces, fig / "loss.png")
        if gt is not None:
            plotting.error_trajectory(res.reports, fig / "stage_errors.png")
        plotting.camera_centers(_aligned(res.poses, gt), gt, fig / "cameras.png", res.excluded)
        if res.final_scores:
            plotting.score_bars(res.final_scores, fig / "final_scores.png")
    return summary


def _aligned(poses: dict, gt: dict | None) -> dict:
    from .evaluate import AlignmentError, procrustes_align

    if gt is None:
        return poses
    try:
        a = procrustes_align(poses, gt)
    except AlignmentError:
        return poses
    return {k: a.apply_pose(p) for k, p in poses.items()}


def _load_dataset(cfg: RunConfig):
    from .io import load_transforms

    p = Path(cfg.dataset)
    if p.is_file():
        return load_transforms(p, cfg.dataset_downscale)
    views = load_viewset(p)
    if cfg.dataset_downscale > 1:
        views = views.downscaled(cfg.dataset_downscale)
    return views


def _score_row(s) -> dict:
    return {"view_id": s.view_id, "kp_score": s.kp_score, "mse_c": s.mse_c, "combined": s.combined,
            "label": s.label, "n_ref_keypoints": s.n_ref_keypoints}


def _print_rows(rows):
    if not rows:
        return
    print(",".join(rows[0]))
    for r in rows:
        print(",".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in r.values()))


def _resolve(args) -> RunConfig:
    if getattr(args, "manifest", None):
        _check_exists(args.manifest)
        cfg = load_manifest(args.manifest, args.set)
    else:
        _check_exists(args.config)
        cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output = args.out
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    return cfg.validate()


def _write_manifest(out: Path, cfg: RunConfig, command: str):
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "workers": cfg.resolved_workers(),
        "config": to_dict(cfg),
        "open_questions": OPEN_QUESTIONS,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cascade-ba", description="Cascaded photometric bundle adjustment for noisy or missing camera poses.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp, workers=False):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--config", help="TOML run configuration")
        g.add_argument("--manifest", help="re-run from a manifest.json written by an earlier run")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. cascade.fine.iterations=5000")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("--out", help="output directory")
        if workers:
            sp.add_argument("--workers", type=int, help="worker threads (0 = all cores)")

    sp = sub.add_parser("synthesize-scene", help="procedural scene and ground-truth views")
    config_args(sp)
    sp.set_defaults(func=cmd_synthesize_scene)

    sp = sub.add_parser("perturb-poses", help="add SE(3) noise to a pose file")
    sp.add_argument("--poses", required=True)
    sp.add_argument("--coefficient", type=float, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_perturb_poses)

    sp = sub.add_parser("drop-poses", help="remove the poses of a random fraction of views")
    sp.add_argument("--views", required=True)
    sp.add_argument("--fraction", type=float, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_drop_poses)

    sp = sub.add_parser("run", help="full cascade with artifacts")
    config_args(sp, workers=True)
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("score-views", help="per-view criterion scores as CSV")
    sp.add_argument("--grid", required=True)
    sp.add_argument("--poses", required=True)
    sp.add_argument("--views", required=True)
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--mse-gate", type=float, default=5.0, help="0 disables the gate")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_score_views)

    sp = sub.add_parser("render", help="render a grid at the given poses")
    sp.add_argument("--grid", required=True)
    sp.add_argument("--poses", required=True)
    sp.add_argument("--views", help="view set supplying the intrinsics")
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--fov", type=float, default=40.0, help="horizontal field of view, degrees")
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("evaluate", help="pose errors (and image quality) as CSV")
    sp.add_argument("--est", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--views", help="reference images for PSNR/SSIM")
    sp.add_argument("--grid", help="reconstruction to render for PSNR/SSIM")
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
