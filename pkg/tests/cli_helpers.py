"""Reduced-scale CLI configuration shared by the CLI and acceptance tests."""

from pathlib import Path

from cascade_ba.cli import main

SMALL_TOML = """\
seed = {seed}
noise_coefficient = {noise}
drop_fraction = {drop}
workers = {workers}

[scene]
n_blobs = 6
resolution = 24

[rig]
n_views = 8
width = 32
height = 32

[cascade]
grid_resolution = 12
samples_per_ray = 16
batch_size = 256
final_grid_resolution = 12
final_samples_per_ray = 16
max_recursive_stages = 2
coarse = {{ iterations = 40, modulation = 10.0 }}
recursive = {{ iterations = 40, modulation = 3.0 }}
fine = {{ iterations = 60 }}
final = {{ iterations = 30, lr_pose_start = 0.0, lr_pose_end = 0.0 }}

[render]
samples_per_ray = 32
"""


def small_config(tmp_path: Path, seed=0, noise=0.15, drop=0.0, workers=1, name="run.toml") -> Path:
    p = tmp_path / name
    p.write_text(SMALL_TOML.format(seed=seed, noise=noise, drop=drop, workers=workers))
    return p


def cli(*args) -> int:
    return main([str(a) for a in args])
