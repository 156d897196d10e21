import numpy as np
import pytest

from cascade_ba.orb import N_BITS, PATCH, detect_keypoints, fast_corners, hamming_matrix, to_gray


def block_texture(seed, size=64, block=6):
    """Random colored rectangles: plenty of L-shaped corners."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size, 3), 0.5)
    for _ in range(40):
        y, x = rng.integers(0, size - block, 2)
        h, w = rng.integers(block, 3 * block, 2)
        img[y:y + h, x:x + w] = rng.uniform(0, 1, 3)
    return img


def test_uniform_image_has_no_keypoints():
    kps, desc = detect_keypoints(np.full((64, 64, 3), 0.4))
    assert kps == [] and desc.shape == (0, N_BITS // 8)


def test_image_smaller_than_patch_gives_empty_set():
    kps, desc = detect_keypoints(block_texture(0, size=PATCH - 1, block=3))
    assert kps == [] and len(desc) == 0


def test_keypoints_sorted_and_inside_image():
    img = block_texture(1)
    kps, desc = detect_keypoints(img, max_kp=30)
    assert 0 < len(kps) <= 30 and desc.shape == (len(kps), 32)
    r = [k.response for k in kps]
    assert r == sorted(r, reverse=True)
    assert all(0 <= k.x < 64 and 0 <= k.y < 64 for k in kps)


def test_luma_weights():
    img = np.zeros((2, 2, 3))
    img[..., 0], img[..., 1], img[..., 2] = 1.0, 0.5, 0.25
    np.testing.assert_allclose(to_gray(img), 0.299 + 0.5 * 0.587 + 0.25 * 0.114)


@pytest.mark.parametrize("seed", range(3))
def test_fast_matches_opencv(seed):
    cv2 = pytest.importorskip("cv2")
    rng = np.random.default_rng(seed)
    img = np.kron((rng.uniform(0, 1, (8, 8)) > 0.5) * 140 + 40, np.ones((5, 5)))
    img = (img + rng.integers(0, 30, img.shape)).astype(np.uint8)
    # OpenCV compares integers strictly, so its threshold t equals t + 0.5 on a continuous scale
    mine = fast_corners(img / 255.0, 20.5 / 255.0, 9)
    det = cv2.FastFeatureDetector_create(threshold=20, nonmaxSuppression=False,
                                         type=cv2.FAST_FEATURE_DETECTOR_TYPE_9_16)
    theirs = np.zeros_like(mine)
    for k in det.detect(img):
        theirs[int(round(k.pt[1])), int(round(k.pt[0]))] = True
    assert mine.any() and np.array_equal(mine, theirs)


@pytest.mark.parametrize("seed", range(4))
def test_rotated_copy_has_corresponding_keypoints(seed):
    img = block_texture(seed)
    kps, _ = detect_keypoints(img)
    rk, _ = detect_keypoints(np.rot90(img, 1))
    w = img.shape[1]
    # np.rot90 sends pixel (y, x) to (w - 1 - x, y)
    found = 0
    for k in kps:
        ex, ey = k.y, w - 1 - k.x
        if any(abs(r.x - ex) <= 2 and abs(r.y - ey) <= 2 for r in rk):
            found += 1
    assert len(kps) >= 10
    assert found / len(kps) >= 0.8


def squares_image():
    img = np.full((64, 64, 3), 0.1)
    corners = []
    for y0, x0 in [(18, 18), (18, 38), (38, 18), (38, 38)]:
        img[y0:y0 + 8, x0:x0 + 8] = 0.9
        corners += [(x0, y0), (x0 + 7, y0), (x0, y0 + 7), (x0 + 7, y0 + 7)]
    return img, corners


def test_square_corners_are_detected():
    img, corners = squares_image()
    kps, _ = detect_keypoints(img)
    def near(k, c):
        return abs(k.x - c[0]) <= 2 and abs(k.y - c[1]) <= 2

    assert kps and all(any(near(k, c) for c in corners) for k in kps)
    inside = [(cx, cy) for cx, cy in corners if 15 <= cx < 49 and 15 <= cy < 49]
    hit = [c for c in inside if any(near(k, c) for k in kps)]
    assert len(hit) == len(inside)


@pytest.mark.xfail(reason="FAST-9 cannot fire on X-junctions (OpenCV finds none either); see decisions ledger",
                   strict=False)
def test_checkerboard_interior_corners_are_detected():
    sq = 8
    cb = ((np.arange(64)[:, None] // sq + np.arange(64)[None, :] // sq) % 2) * 0.8 + 0.1
    kps, _ = detect_keypoints(np.repeat(cb[..., None], 3, axis=2))
    print(f"{len(kps)} keypoints on the checkerboard")
    interior = [(x - 0.5, y - 0.5) for x in range(sq * 2, 64 - sq, sq) for y in range(sq * 2, 64 - sq, sq)]
    assert kps
    for k in kps:
        assert min(np.hypot(k.x - cx, k.y - cy) for cx, cy in interior) <= 2


def test_hamming_matrix_against_bit_count():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 256, (5, 32), dtype=np.uint8)
    b = rng.integers(0, 256, (7, 32), dtype=np.uint8)
    d = hamming_matrix(a, b)
    for i in range(5):
        for j in range(7):
            assert d[i, j] == sum(bin(x ^ y).count("1") for x, y in zip(a[i], b[j]))
