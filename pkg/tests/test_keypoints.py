import numpy as np
import pytest

from patchloc.errors import FormatError, InvariantViolation
from patchloc.keypoints import (
    KeypointSet,
    load_keypoints,
    match_keypoints,
    ransac_filter,
    save_keypoints,
)


def unit_rows(rows):
    arr = np.asarray(rows, dtype=np.float64)
    return (arr / np.linalg.norm(arr, axis=1, keepdims=True)).astype(np.float32)


def make_set(coords, descs, image_id="img", size=100):
    return KeypointSet(
        image_id=image_id,
        image_height=size,
        image_width=size,
        coords=np.asarray(coords, dtype=np.float32),
        descriptors=unit_rows(descs),
    )


def test_roundtrip(tmp_path):
    kps = make_set([(1.5, 2.5), (10.0, 20.0)], [[1, 0, 0], [0, 1, 0]])
    path = tmp_path / "k.pnvk"
    save_keypoints(kps, path)
    loaded = load_keypoints(path, image_id="img")
    assert loaded.image_height == 100 and loaded.image_width == 100
    assert np.array_equal(loaded.coords, kps.coords)
    assert np.array_equal(loaded.descriptors, kps.descriptors)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.pnvk"
    path.write_bytes(b"WHAT" + b"\x00" * 24)
    with pytest.raises(FormatError, match="magic"):
        load_keypoints(path)


def test_truncated(tmp_path):
    kps = make_set([(1.0, 1.0), (2.0, 2.0)], [[1, 0], [0, 1]])
    path = tmp_path / "t.pnvk"
    save_keypoints(kps, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_keypoints(path)


def test_non_unit_descriptor_rejected():
    with pytest.raises(InvariantViolation, match="unit"):
        KeypointSet(
            image_id="x", image_height=10, image_width=10,
            coords=np.array([[1.0, 1.0]], dtype=np.float32),
            descriptors=np.array([[2.0, 0.0]], dtype=np.float32),
        )


def test_out_of_bounds_coordinate_rejected():
    with pytest.raises(InvariantViolation, match="bounds"):
        make_set([(150.0, 0.0)], [[1, 0]])


class TestMatch:
    def test_exact_match_kept(self):
        a = make_set([(0, 0)], [[1, 0, 0]])
        b = make_set([(5, 5), (6, 6), (7, 7)], [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
        assert match_keypoints(a, b, 0.8) == [(0, 0)]

    def test_equidistant_rejected(self):
        a = make_set([(0, 0)], [[1, 1, 0]])
        b = make_set([(1, 1), (2, 2)], [[1, 0, 0], [0, 1, 0]])
        assert match_keypoints(a, b, 0.99) == []

    def test_hand_ratios(self):
        # query angles chosen so the nearest/second-nearest distance
        # ratios are exactly 0.5, 0.9 and 0.99; threshold 0.8 keeps only
        # the first
        def at(angle):
            return [np.cos(angle), np.sin(angle)]

        def angle_for(ratio):
            lo, hi = np.pi / 4, np.pi / 2  # nearest is the 90-degree target
            for _ in range(60):
                mid = (lo + hi) / 2
                r = (1 - np.sin(mid)) / (1 - np.cos(mid))
                lo, hi = (lo, mid) if r < ratio else (mid, hi)
            return (lo + hi) / 2

        targets = [at(0.0), at(np.pi / 2)]
        queries = [at(angle_for(r)) for r in (0.5, 0.9, 0.99)]
        a = make_set([(i, i) for i in range(3)], queries)
        b = make_set([(0, 0), (9, 9)], targets)
        d = 1.0 - np.array(unit_rows(queries), dtype=np.float64) @ np.array(targets).T
        for i, expect in enumerate((0.5, 0.9, 0.99)):
            lo, hi = sorted(d[i])
            assert abs(lo / hi - expect) < 1e-4
        kept = match_keypoints(a, b, 0.8)
        assert [m[0] for m in kept] == [0]


class TestRansac:
    def test_consistent_translation_all_kept(self):
        coords_a = [(i * 3.0, i * 2.0 + 5.0) for i in range(6)]
        coords_b = [(x + 4.0, y - 1.0) for x, y in coords_a]
        a = make_set(coords_a, np.eye(6))
        b = make_set(coords_b, np.eye(6))
        matches = [(i, i) for i in range(6)]
        assert ransac_filter(matches, a, b, iters=100, tol=0.5) == matches

    def test_gross_outlier_dropped(self):
        coords_a = [(float(i), float(i)) for i in range(10)]
        coords_b = [(x + 2.0, y + 3.0) for x, y in coords_a[:9]] + [(95.0, 95.0)]
        a = make_set(coords_a, np.eye(10))
        b = make_set(coords_b, np.eye(10))
        matches = [(i, i) for i in range(10)]
        kept = ransac_filter(matches, a, b, iters=100, tol=0.5)
        assert kept == matches[:9]

    def test_single_match_is_its_own_inlier(self):
        a = make_set([(1.0, 1.0)], [[1, 0]])
        b = make_set([(9.0, 9.0)], [[1, 0]])
        assert ransac_filter([(0, 0)], a, b, iters=10, tol=1.0) == [(0, 0)]

    def test_empty_matches_rejected(self):
        a = make_set([(1.0, 1.0)], [[1, 0]])
        with pytest.raises(InvariantViolation):
            ransac_filter([], a, a, iters=10, tol=1.0)

    def test_inliers_within_tolerance_of_model(self):
        rng = np.random.default_rng(0)
        coords_a = rng.uniform(10, 50, size=(20, 2))
        coords_b = coords_a + np.array([5.0, -3.0]) + rng.uniform(-0.2, 0.2, size=(20, 2))
        coords_b[15:] = rng.uniform(60, 90, size=(5, 2))
        a = make_set(coords_a, np.eye(20))
        b = make_set(np.clip(coords_b, 0, 100), np.eye(20))
        matches = [(i, i) for i in range(20)]
        kept = ransac_filter(matches, a, b, iters=50, tol=1.0)
        assert set(kept) == set(matches[:15])
        disp = b.coords[[m[1] for m in kept]] - a.coords[[m[0] for m in kept]]
        spread = np.linalg.norm(disp - disp[0], axis=1)
        assert np.all(spread <= 2.0)  # all inliers within tol of one model
