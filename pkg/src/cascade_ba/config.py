"""Run configuration: one TOML file per run, overridable from the command line.

Precedence, lowest first: built-in defaults, the config file, ``--set
key=value`` overrides, then dedicated CLI flags (``--seed``, ``--out``,
``--workers``).
"""

from __future__ import annotations

import dataclasses
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ba import BAOptions, ScheduleConfig
from .cascade import CascadeConfig
from .criterion import ClassifyPolicy, MatchParams, ScoreParams
from .orb import ORBParams
from .render import RenderConfig
from .scene import DEFAULT_FOV_DEG, DEFAULT_RIG_RADIUS, SceneSpec


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; the message names the field."""


@dataclass
class RigSpec:
    n_views: int = 20
    radius: float = DEFAULT_RIG_RADIUS
    width: int = 64
    height: int = 64
    fov_deg: float = DEFAULT_FOV_DEG


@dataclass
class StageSpec:
    iterations: int = 2000
    modulation: float = 1.0
    lr_pose_start: float = 1e-2
    lr_pose_end: float = 1e-4
    lr_grid_start: float = 1e-1
    lr_grid_end: float = 1e-2

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(**dataclasses.asdict(self))


@dataclass
class CascadeSpec:
    downscale: int = 2
    max_recursive_stages: int = 3
    loop_epsilon: float = 0.01
    nms_radius_deg: float = 30.0
    replacement: bool = True
    final_check: bool = True
    grid_resolution: int = 24
    samples_per_ray: int = 32
    batch_size: int = 1024
    final_grid_resolution: int = 32
    final_samples_per_ray: int = 32
    coarse: StageSpec = field(default_factory=lambda: StageSpec(2000, 10.0))
    recursive: StageSpec = field(default_factory=lambda: StageSpec(2000, 3.0))
    fine: StageSpec = field(default_factory=lambda: StageSpec(10000, 1.0))
    final: StageSpec = field(default_factory=lambda: StageSpec(3000, 1.0, 0.0, 0.0))


@dataclass
class CriterionSpec:
    ratio: float = 0.75
    tau_fraction: float = 0.05
    k_min: int = 50
    weight: float = 0.7
    max_keypoints: int = 500
    fast_threshold: float = 0.05
    n_sigma: float = 1.0
    cap_fraction: float = 0.25
    mse_gate: float = 5.0  # 0 disables the gate


@dataclass
class RenderSpec:
    samples_per_ray: int = 64
    near: float = 0.5
    far: float = 12.0
    background: list = field(default_factory=lambda: [1.0, 1.0, 1.0])

    def config(self) -> RenderConfig:
        return RenderConfig(self.samples_per_ray, self.near, self.far, tuple(self.background))


@dataclass
class RunConfig:
    seed: int = 0
    output: str = "run"
    workers: int = 0                # 0 = all cores
    scene: dict | None = None       # {n_blobs, resolution}; exclusive with dataset
    dataset: str | None = None      # view-set directory or transforms.json
    dataset_downscale: int = 1
    init_poses: str | None = None   # pose file; skips noise when given
    noise_coefficient: float = 0.15
    drop_fraction: float = 0.0
    rig: RigSpec = field(default_factory=RigSpec)
    cascade: CascadeSpec = field(default_factory=CascadeSpec)
    criterion: CriterionSpec = field(default_factory=CriterionSpec)
    render: RenderSpec = field(default_factory=RenderSpec)

    def resolved_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    def rig_params(self):
        from .problem import RigParams

        return RigParams(**dataclasses.asdict(self.rig))

    def scene_spec(self, seed: int) -> SceneSpec:
        s = dict(self.scene or {})
        return SceneSpec(seed=seed, n_blobs=int(s.get("n_blobs", 12)), resolution=int(s.get("resolution", 48)))

    def score_params(self) -> ScoreParams:
        c = self.criterion
        orb = ORBParams(max_keypoints=c.max_keypoints, fast_threshold=c.fast_threshold)
        return ScoreParams(c.weight, c.k_min, MatchParams(c.ratio, c.tau_fraction, orb))

    def cascade_config(self) -> CascadeConfig:
        c, k = self.cascade, self.criterion
        ba = BAOptions(c.grid_resolution, c.batch_size, RenderConfig(
            c.samples_per_ray, self.render.near, self.render.far, tuple(self.render.background)),
            workers=self.resolved_workers())
        final_ba = dataclasses.replace(ba, grid_resolution=c.final_grid_resolution, render=dataclasses.replace(
            ba.render, samples_per_ray=c.final_samples_per_ray))
        return CascadeConfig(
            coarse=c.coarse.schedule(), recursive=c.recursive.schedule(), fine=c.fine.schedule(),
            final=c.final.schedule() if c.final.iterations > 0 else None,
            max_recursive_stages=c.max_recursive_stages, loop_epsilon=c.loop_epsilon,
            nms_radius_deg=c.nms_radius_deg,
            policy=ClassifyPolicy(k.n_sigma, k.cap_fraction, k.mse_gate if k.mse_gate > 0 else None),
            score=self.score_params(), score_render=self.render.config(), downscale=c.downscale,
            ba=ba, final_ba=final_ba, replacement=c.replacement, final_check=c.final_check,
        )

    def validate(self):
        if (self.scene is None) == (self.dataset is None):
            raise ConfigError("exactly one of [scene] or dataset must be given")
        if self.dataset is not None and not Path(self.dataset).exists():
            raise ConfigError(f"dataset: path does not exist: {self.dataset}")
        if self.init_poses is not None and not Path(self.init_poses).exists():
            raise ConfigError(f"init_poses: path does not exist: {self.init_poses}")
        if self.workers < 0:
            raise ConfigError("workers: must be >= 0 (0 = all cores)")
        if not 0 <= self.drop_fraction < 1:
            raise ConfigError("drop_fraction: must be in [0, 1)")
        if self.noise_coefficient < 0:
            raise ConfigError("noise_coefficient: must be >= 0")
        # building the typed configs runs their own checks
        try:
            self.cascade_config()
            if self.scene is not None:
                self.scene_spec(self.seed)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        return self


def _default_run_config() -> RunConfig:
    return RunConfig(scene={"n_blobs": 12, "resolution": 48})


def _line_of(text: str, key: str) -> int | None:
    leaf = key.rsplit(".", 1)[-1]
    for i, line in enumerate(text.splitlines(), 1):
        if re.match(rf"\s*{re.escape(leaf)}\s*=", line):
            return i
    return None


def _coerce(value, current, key: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str) or current is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def _apply(obj, table: dict, prefix: str = ""):
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in table.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"{path}: unknown setting")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a table")
            _apply(current, value, path + ".")
        elif key == "scene":
            if value is None:
                setattr(obj, key, None)
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a table")
            unknown = set(value) - {"n_blobs", "resolution"}
            if unknown:
                raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown setting")
            setattr(obj, key, dict(value))
        else:
            setattr(obj, key, _coerce(value, current, path))


def _parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected key=value")
    key, raw = item.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare strings
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return node


def load_config(path: str | os.PathLike | None = None, overrides: list | None = None) -> RunConfig:
    """Defaults, then the TOML file, then ``key=value`` overrides."""
    cfg = _default_run_config()
    text = ""
    if path is not None:
        text = Path(path).read_text()
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if "dataset" in doc and "scene" not in doc:
            cfg.scene = None
        try:
            _apply(cfg, doc)
        except ConfigError as exc:
            key = str(exc).split(":", 1)[0]
            line = _line_of(text, key)
            where = f"{path}:{line}" if line else str(path)
            raise ConfigError(f"{where}: {exc}") from None
    for item in overrides or []:
        node = _parse_override(item)
        if "dataset" in node:
            cfg.scene = None
        _apply(cfg, node)
    return cfg


def load_manifest(path, overrides: list | None = None) -> RunConfig:
    """The resolved configuration stored in a run manifest."""
    import json

    try:
        doc = json.loads(Path(path).read_text())["config"]
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: not a run manifest ({exc})") from exc
    cfg = _default_run_config()
    _apply(cfg, doc)
    for item in overrides or []:
        _apply(cfg, _parse_override(item))
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
