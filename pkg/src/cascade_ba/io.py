"""On-disk formats: pose files, view-set directories, grid blobs, CSV tables.

Pose files are JSON.  Each pose is a 3x4 camera-to-world matrix ``[R | t]``
in row-major order with OpenCV camera axes (x right, y down, z forward).
Floats are written with ``repr`` precision, so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import CameraIntrinsics, View, ViewSet, VoxelGrid, box_downscale
from .se3 import PoseSE3

CONVENTION = "camera-to-world [R|t], camera axes x right, y down, z forward"
GRID_MAGIC = b"CBAGRID1"
GRID_HEADER = struct.Struct("<8s3I6d")
VIEWS_MANIFEST = "views.json"
VIEWS_ARRAYS = "views.npz"
# OpenGL/Blender camera axes (x right, y up, z backward) -> OpenCV axes
GL_TO_CV = np.diag([1.0, -1.0, -1.0])


class FormatError(ValueError):
    """A file exists but does not follow the expected layout."""


def pose_to_list(pose: PoseSE3 | None):
    if pose is None:
        return None
    return [[float(x) for x in row] for row in np.hstack([pose.R, pose.t[:, None]])]


def pose_from_list(rows) -> PoseSE3 | None:
    if rows is None:
        return None
    m = np.asarray(rows, dtype=float)
    if m.shape != (3, 4):
        raise FormatError(f"pose must be 3x4, got {m.shape}")
    return PoseSE3(m[:, :3], m[:, 3])


def save_poses(path, poses: dict):
    doc = {
        "convention": CONVENTION,
        "poses": [{"view_id": int(k), "pose": pose_to_list(poses[k])} for k in sorted(poses)],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_poses(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
        return {int(e["view_id"]): pose_from_list(e["pose"]) for e in doc["poses"]}
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a pose file ({exc})") from exc


def to_uint8(image) -> np.ndarray:
    return (np.clip(np.asarray(image, dtype=float), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(path, image):
    arr = to_uint8(image) if np.asarray(image).dtype != bool else np.asarray(image, dtype=np.uint8) * 255
    Image.fromarray(arr).save(path)


def load_png(path, background=(1.0, 1.0, 1.0)) -> tuple[np.ndarray, np.ndarray | None]:
    """Float RGB image in [0, 1] and an alpha-derived mask when the file has alpha."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("RGBA", "LA") or "transparency" in im.info:
            rgba = np.asarray(im.convert("RGBA"), dtype=float) / 255.0
            alpha = rgba[..., 3:]
            rgb = rgba[..., :3] * alpha + np.asarray(background) * (1.0 - alpha)
            return rgb, alpha[..., 0] > 0.5
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0, None


def intrinsics_to_dict(intr: CameraIntrinsics) -> dict:
    return {"focal": intr.focal, "cx": intr.cx, "cy": intr.cy, "width": intr.width, "height": intr.height}


def intrinsics_from_dict(d) -> CameraIntrinsics:
    return CameraIntrinsics(float(d["focal"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


def save_viewset(directory, views: ViewSet):
    """PNG files for inspection plus exact float arrays and a JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, arrays = [], {}
    for v in views:
        name = f"view_{v.view_id:04d}"
        save_png(d / f"{name}.png", v.image)
        arrays[f"image_{v.view_id}"] = v.image
        entry = {"view_id": v.view_id, "image": f"{name}.png", "pose": pose_to_list(v.pose), "mask": None}
        if v.mask is not None:
            save_png(d / f"{name}_mask.png", v.mask)
            arrays[f"mask_{v.view_id}"] = v.mask
            entry["mask"] = f"{name}_mask.png"
        entries.append(entry)
    np.savez_compressed(d / VIEWS_ARRAYS, **arrays)
    doc = {"convention": CONVENTION, "intrinsics": intrinsics_to_dict(views.intrinsics), "views": entries}
    (d / VIEWS_MANIFEST).write_text(json.dumps(doc, indent=1))


def load_viewset(directory) -> ViewSet:
    """Read a view-set directory; a ``transforms.json`` directory is ingested instead."""
    d = Path(directory)
    if not (d / VIEWS_MANIFEST).exists() and (d / "transforms.json").exists():
        return load_transforms(d / "transforms.json")
    try:
        doc = json.loads((d / VIEWS_MANIFEST).read_text())
        intr = intrinsics_from_dict(doc["intrinsics"])
        arrays = np.load(d / VIEWS_ARRAYS) if (d / VIEWS_ARRAYS).exists() else None
        views = []
        for e in doc["views"]:
            vid = int(e["view_id"])
            if arrays is not None and f"image_{vid}" in arrays:
                image = arrays[f"image_{vid}"]
                mask = arrays[f"mask_{vid}"] if f"mask_{vid}" in arrays else None
            else:
                image, mask = load_png(d / e["image"])
                if e.get("mask"):
                    mask = load_png(d / e["mask"])[0][..., 0] > 0.5
            views.append(View(vid, image, pose_from_list(e.get("pose")), mask))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{d}: malformed view manifest ({exc})") from exc
    return ViewSet(views, intr)


def load_transforms(path, downscale: int = 1, background=(1.0, 1.0, 1.0)) -> ViewSet:
    """Ingest the common ``transforms.json`` layout.

    Fields used: ``camera_angle_x`` (or ``fl_x``), and per frame ``file_path``
    (extension optional, ``.png`` assumed) and a 4x4 OpenGL-axes
    ``transform_matrix``.  RGBA images are composited over ``background`` and
    their alpha becomes the foreground mask.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        frames = doc["frames"]
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a transforms file ({exc})") from exc
    views = []
    width = height = None
    for i, f in enumerate(frames):
        img_path = path.parent / f["file_path"]
        if not img_path.suffix:
            img_path = img_path.with_suffix(".png")
        image, mask = load_png(img_path, background)
        if downscale > 1:
            image = box_downscale(image, downscale)
            mask = None if mask is None else box_downscale(mask.astype(float), downscale) > 0.5
        height, width = image.shape[:2]
        m = np.asarray(f["transform_matrix"], dtype=float)
        if m.shape != (4, 4):
            raise FormatError(f"{path}: frame {i} transform_matrix must be 4x4")
        R = m[:3, :3] @ GL_TO_CV
        # orthonormalize away the rounding in the stored matrix
        u, _, vt = np.linalg.svd(R)
        views.append(View(i, image, PoseSE3(u @ vt, m[:3, 3]), mask))
    if not views:
        raise FormatError(f"{path}: no frames")
    if "fl_x" in doc:
        focal = float(doc["fl_x"]) / downscale
    else:
        focal = 0.5 * width / math.tan(0.5 * float(doc["camera_angle_x"]))
    return ViewSet(views, CameraIntrinsics(focal, width / 2, height / 2, width, height))


def save_grid(path, grid: VoxelGrid):
    """Header (magic, nx, ny, nz, bbox lo, bbox hi), then raw density and RGB, row-major float64."""
    nx, ny, nz = grid.resolution
    header = GRID_HEADER.pack(GRID_MAGIC, nx, ny, nz, *grid.lo, *grid.hi)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.density_raw, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(grid.color, dtype="<f8").tobytes())


def load_grid(path) -> VoxelGrid:
    data = Path(path).read_bytes()
    if len(data) < GRID_HEADER.size:
        raise FormatError(f"{path}: truncated grid header")
    magic, nx, ny, nz, *box = GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise FormatError(f"{path}: bad grid magic {magic!r}")
    n = nx * ny * nz
    body = np.frombuffer(data, dtype="<f8", offset=GRID_HEADER.size)
    if body.size != 4 * n:
        raise FormatError(f"{path}: expected {4 * n} values, found {body.size}")
    raw = body[:n].reshape(nx, ny, nz).copy()
    color = body[n:].reshape(nx, ny, nz, 3).copy()
    return VoxelGrid(raw, color, (tuple(box[:3]), tuple(box[3:])))


def write_csv(path, rows: list, fieldnames: list | None = None):
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
