"""Report figures written as PNG files next to the CSV artifacts."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def loss_curves(traces: list, path):
    """Photometric loss per iteration for each (label, BAState) run."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for label, st in traces:
        ax.plot(np.asarray(st.loss_trace), label=label, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if traces:
        ax.legend(fontsize=7)
    return _save(fig, path)


def error_trajectory(reports: list, path):
    """Mean rotation and translation error after every stage."""
    rows = [r for r in reports if r.rotation_error is not None]
    fig, (a, b) = plt.subplots(1, 2, figsize=(7.2, 3.0))
    x = [f"{r.index}:{r.kind[0]}" for r in rows]
    a.plot(x, [r.rotation_error for r in rows], "o-")
    a.set_ylabel("rotation error (deg)")
    b.plot(x, [r.translation_error for r in rows], "o-", color="tab:orange")
    b.set_ylabel("translation error (x100)")
    for ax in (a, b):
        ax.set_xlabel("stage")
    return _save(fig, path)


def camera_centers(est: dict, gt: dict | None, path, excluded=()):
    """Top-down and side views of estimated (and ground-truth) camera centers."""
    fig, axes = plt.subplots(1, 2, figsize=(7.2, 3.4))
    ids = sorted(est)
    ce = np.array([est[v].t for v in ids]) if ids else np.zeros((0, 3))
    for ax, (i, j), name in zip(axes, [(0, 1), (0, 2)], ["x-y", "x-z"]):
        if gt is not None:
            common = [v for v in ids if v in gt]
            cg = np.array([gt[v].t for v in common]) if common else np.zeros((0, 3))
            ax.scatter(cg[:, i], cg[:, j], s=18, facecolors="none", edgecolors="k", label="ground truth")
            for v in common:
                ax.plot([gt[v].t[i], est[v].t[i]], [gt[v].t[j], est[v].t[j]], "k-", lw=0.4)
        ax.scatter(ce[:, i], ce[:, j], s=10, c="tab:blue", label="estimate")
        bad = [v for v in excluded if v in est]
        if bad:
            cb = np.array([est[v].t for v in bad])
            ax.scatter(cb[:, i], cb[:, j], s=30, marker="x", c="tab:red", label="excluded")
        ax.set_title(name, fontsize=9)
        ax.set_aspect("equal", adjustable="datalim")
    axes[0].legend(fontsize=7)
    return _save(fig, path)


def score_bars(scores: list, path):
    """Combined score per view, inferior views highlighted."""
    fig, ax = plt.subplots(figsize=(6.4, 3.0))
    ids = [s.view_id for s in scores]
    colors = ["tab:red" if s.label == "inferior" else "tab:gray" for s in scores]
    ax.bar([str(v) for v in ids], [s.combined for s in scores], color=colors)
    ax.set_xlabel("view")
    ax.set_ylabel("combined score")
    ax.tick_params(axis="x", labelsize=6)
    return _save(fig, path)
