import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from cascade_ba.criterion import INFERIOR, SUPERIOR, ViewScore
from cascade_ba.render import RenderConfig, render
from cascade_ba.replace import (ROTATIONS, ReplacementAssignment, ReplacementMemory, apply_replacement,
                                center_angle, find_neighbor, nms_filter, pair_similarities, replaced_pose,
                                rotate_image)
from cascade_ba.scene import look_at
from test_orb import block_texture


def ring_pose(azimuth_deg, elevation_deg=30.0, radius=3.0):
    a, e = math.radians(azimuth_deg), math.radians(elevation_deg)
    return look_at(radius * np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)]))


def _score(vid, value, label=INFERIOR):
    return ViewScore(vid, 0.5, 0.01, value, label)


def labels(scores):
    return {s.view_id: s.label for s in scores}


def test_center_angle():
    assert abs(center_angle([1, 0, 0], [0, 2, 0]) - 90.0) < 1e-12
    assert center_angle([1, 1, 1], [2, 2, 2]) == 0.0


def test_nms_single_isolated_view_unchanged():
    poses = {i: ring_pose(60 * i) for i in range(6)}
    scores = [_score(i, 0.9, SUPERIOR) for i in range(6)]
    scores[2] = _score(2, 0.1)
    assert labels(nms_filter(scores, poses))[2] == INFERIOR


def test_nms_cluster_keeps_minimum():
    poses = {0: ring_pose(0), 1: ring_pose(10), 2: ring_pose(20), 3: ring_pose(180)}
    scores = [_score(0, 0.30), _score(1, 0.20), _score(2, 0.35), _score(3, 0.9, SUPERIOR)]
    assert labels(nms_filter(scores, poses)) == {0: SUPERIOR, 1: INFERIOR, 2: SUPERIOR, 3: SUPERIOR}


def test_nms_distant_views_both_kept():
    poses = {0: ring_pose(0), 1: ring_pose(90)}
    scores = [_score(0, 0.2), _score(1, 0.3)]
    assert labels(nms_filter(scores, poses, radius_deg=30.0)) == {0: INFERIOR, 1: INFERIOR}


def test_nms_tie_goes_to_lower_id():
    poses = {4: ring_pose(0), 7: ring_pose(5)}
    out = labels(nms_filter([_score(7, 0.2), _score(4, 0.2)], poses))
    assert out == {4: INFERIOR, 7: SUPERIOR}


@given(st.lists(st.tuples(st.floats(0, 360), st.floats(5, 80), st.floats(0, 1), st.booleans()),
                min_size=1, max_size=15), st.floats(0, 90))
def test_nms_never_grows_and_leaves_separated_survivors(specs, radius):
    poses = {i: ring_pose(a, e) for i, (a, e, _, _) in enumerate(specs)}
    scores = [_score(i, v, INFERIOR if bad else SUPERIOR) for i, (_, _, v, bad) in enumerate(specs)]
    before = {s.view_id for s in scores if s.label == INFERIOR}
    nms_filter(scores, poses, radius)
    after = [s.view_id for s in scores if s.label == INFERIOR]
    assert set(after) <= before
    assert bool(after) == bool(before)
    for i in after:
        for j in after:
            if i < j:
                assert center_angle(poses[i].t, poses[j].t) > radius


def test_rotate_image_validates():
    with pytest.raises(ValueError):
        rotate_image(np.zeros((4, 4, 3)), 45)
    img = np.arange(16.0).reshape(4, 4)
    assert np.array_equal(rotate_image(img, 360), img)
    assert np.array_equal(rotate_image(rotate_image(img, 90), 270), img)


def test_duplicate_candidate_matched_at_zero():
    target = block_texture(10)
    cands = {1: block_texture(11), 2: target.copy(), 3: block_texture(12)}
    a = find_neighbor(0, target, cands, ReplacementMemory())
    assert (a.source, a.rotation) == (2, 0)
    pairs = [(v, img, r) for v, img in sorted(cands.items()) for r in ROTATIONS]
    assert a.similarity == max(pair_similarities(target, pairs))


@pytest.mark.parametrize("rotation", ROTATIONS)
def test_rolled_copy_matched_at_its_rotation(rotation):
    """A candidate whose camera is the target's rolled by -theta is matched at theta."""
    target = block_texture(13)
    cands = {1: block_texture(14), 2: rotate_image(target, -rotation), 3: block_texture(15)}
    a = find_neighbor(0, target, cands, ReplacementMemory())
    assert (a.source, a.rotation) == (2, rotation % 360)
    assert np.array_equal(rotate_image(cands[2], a.rotation), target)


def test_memory_forces_second_best():
    target = block_texture(16)
    cands = {1: block_texture(17), 2: target.copy()}
    mem = ReplacementMemory()
    first = find_neighbor(0, target, cands, mem)
    mem.record(0, first.source, first.rotation)
    second = find_neighbor(0, target, cands, mem)
    assert (second.source, second.rotation) != (first.source, first.rotation)
    assert second.similarity <= first.similarity


def test_target_excluded_and_exhaustion():
    target = block_texture(18)
    cands = {0: target, 1: block_texture(19)}
    mem = ReplacementMemory()
    seen = set()
    for _ in range(len(ROTATIONS)):
        a = find_neighbor(0, target, cands, mem)
        assert a.source == 1
        seen.add((a.source, a.rotation))
        mem.record(0, a.source, a.rotation)
    assert len(seen) == 4
    assert find_neighbor(0, target, cands, mem) is None


def test_apply_zero_rotation_bit_equal():
    poses = {0: ring_pose(0), 1: ring_pose(45, 20)}
    out = apply_replacement(poses, ReplacementAssignment(0, 1, 0, 1.0), ReplacementMemory())
    assert np.array_equal(out[0].R, poses[1].R) and np.array_equal(out[0].t, poses[1].t)
    assert out[1] is poses[1]


@pytest.mark.parametrize("rotation", [90, 180, 270])
def test_apply_rotation_rolls_about_optical_axis(rotation):
    src = ring_pose(33, 41)
    out = apply_replacement({0: ring_pose(0), 1: src}, ReplacementAssignment(0, 1, rotation, 1.0),
                            ReplacementMemory())[0]
    axis = src.R[:, 2]
    np.testing.assert_allclose(out.R[:, 2], axis, atol=1e-12)
    np.testing.assert_array_equal(out.t, src.t)
    # world-frame rotation about the optical axis, built independently
    world = Rotation.from_rotvec(math.radians(rotation) * axis).as_matrix()
    np.testing.assert_allclose(out.R, world @ src.R, atol=1e-12)
    up_src, up_new = -src.R[:, 1], -out.R[:, 1]
    assert abs(math.degrees(math.acos(np.clip(up_src @ up_new, -1, 1))) - (rotation if rotation <= 180 else 360 - rotation)) < 1e-9


def test_rolled_pose_renders_rotated_image(small_scene):
    grid, views = small_scene
    v = views[0]
    base = render(grid, v.pose, views.intrinsics, RenderConfig()).rgb
    for rotation in (90, 180, 270):
        rolled = render(grid, replaced_pose(v.pose, rotation), views.intrinsics, RenderConfig()).rgb
        np.testing.assert_allclose(rolled, rotate_image(base, rotation), atol=1e-9)


def test_repeated_round_uses_new_source_and_valid_poses():
    rng = np.random.default_rng(3)
    images = {i: block_texture(20 + i) for i in range(4)}
    poses = {i: ring_pose(90 * i + rng.uniform(-5, 5), 30) for i in range(4)}
    images[0] = images[2].copy()
    mem = ReplacementMemory()
    applied = []
    cands = {i: images[i] for i in (1, 2, 3)}
    while True:
        a = find_neighbor(0, images[0], cands, mem)
        if a is None:
            break
        poses = apply_replacement(poses, a, mem)
        applied.append((a.target, a.source, a.rotation))
        p = poses[0]
        np.testing.assert_allclose(p.R.T @ p.R, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(p.R) - 1.0) < 1e-12
    assert applied[0] == (0, 2, 0)
    assert applied[1][1:] != applied[0][1:]
    assert len(applied) == len(set(applied)) == 12
    assert len(mem) == 12
