"""Distance transform, thinning, and dilation tests.

The distance transform is checked against a brute-force nearest-false scan,
dilation against a direct lattice-point count, and thinning against its
stated post-conditions (subset, component count, idempotence).
"""
from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage

from dynsplat.geometry import BinaryMask, dilate, disk_footprint, distance_transform, skeletonize

EIGHT = np.ones((3, 3), dtype=int)


def _brute_force_dt(mask: np.ndarray) -> np.ndarray:
    """O(n^2) scan: distance to nearest false pixel, border counts as false."""
    h, w = mask.shape
    false_pts = [(y, x) for y in range(-1, h + 1) for x in range(-1, w + 1)
                 if y < 0 or y >= h or x < 0 or x >= w or not mask[y, x]]
    false_pts = np.array(false_pts, dtype=float)
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                out[y, x] = np.sqrt(((false_pts - [y, x]) ** 2).sum(axis=1)).min()
    return out


# ── distance_transform ───────────────────────────────────────────────────


def test_dt_all_false():
    assert distance_transform(BinaryMask(np.zeros((5, 7), dtype=bool))).sum() == 0.0


def test_dt_single_pixel():
    m = np.zeros((5, 5), dtype=bool)
    m[2, 2] = True
    d = distance_transform(BinaryMask(m))
    assert d[2, 2] == pytest.approx(1.0)
    assert d.sum() == pytest.approx(1.0)


def test_dt_centered_square():
    m = np.zeros((9, 9), dtype=bool)
    m[1:8, 1:8] = True
    d = distance_transform(BinaryMask(m))
    brute = _brute_force_dt(m)
    assert d[4, 4] == pytest.approx(4.0)
    np.testing.assert_allclose(d, brute, atol=1e-12)


def test_dt_matches_brute_force_random():
    rng = np.random.default_rng(31)
    for _ in range(20):
        h, w = rng.integers(1, 33, size=2)
        m = rng.random((h, w)) < 0.6
        np.testing.assert_allclose(
            distance_transform(BinaryMask(m)), _brute_force_dt(m), atol=1e-12
        )


def test_dt_border_counts_as_false():
    m = np.ones((4, 4), dtype=bool)
    d = distance_transform(BinaryMask(m))
    assert d[0, 0] == pytest.approx(1.0)
    assert d[1, 1] == pytest.approx(2.0)


# ── dilate ───────────────────────────────────────────────────────────────


def test_dilate_radius_zero_identity():
    rng = np.random.default_rng(32)
    m = rng.random((10, 12)) < 0.3
    out = dilate(BinaryMask(m), 0)
    np.testing.assert_array_equal(out.values, m)


def test_dilate_single_pixel_disk():
    # lattice points with x^2+y^2 <= 25, counted directly
    count = sum(
        1 for x in range(-5, 6) for y in range(-5, 6) if x * x + y * y <= 25
    )
    assert count == 81
    assert disk_footprint(5).sum() == count

    m = np.zeros((13, 13), dtype=bool)
    m[6, 6] = True
    out = dilate(BinaryMask(m), 5)
    assert out.values.sum() == count
    yy, xx = np.mgrid[0:13, 0:13]
    np.testing.assert_array_equal(out.values, (yy - 6) ** 2 + (xx - 6) ** 2 <= 25)


def test_dilate_matches_definition_random():
    rng = np.random.default_rng(33)
    m = rng.random((16, 16)) < 0.1
    r = 3
    out = dilate(BinaryMask(m), r)
    ys, xs = np.nonzero(m)
    expected = np.zeros_like(m)
    for y in range(16):
        for x in range(16):
            if len(ys) and np.min((ys - y) ** 2 + (xs - x) ** 2) <= r * r:
                expected[y, x] = True
    np.testing.assert_array_equal(out.values, expected)


def test_dilate_monotone():
    rng = np.random.default_rng(34)
    a = rng.random((12, 12)) < 0.15
    b = a | (rng.random((12, 12)) < 0.15)
    da = dilate(BinaryMask(a), 2).values
    db = dilate(BinaryMask(b), 2).values
    assert np.all(db[da])


# ── skeletonize ──────────────────────────────────────────────────────────


def test_skeleton_empty():
    out = skeletonize(BinaryMask(np.zeros((6, 6), dtype=bool)))
    assert out.values.sum() == 0


def test_skeleton_thin_line_preserved():
    m = np.zeros((5, 24), dtype=bool)
    m[2, 2:22] = True
    out = skeletonize(BinaryMask(m)).values
    # already thin: at most the two endpoints may go
    assert np.all(m[out])
    assert out[2, 3:21].all()
    assert out.sum() >= 18


def test_skeleton_disk_collapses_to_center():
    yy, xx = np.mgrid[0:25, 0:25]
    m = (yy - 12) ** 2 + (xx - 12) ** 2 <= 100
    out = skeletonize(BinaryMask(m)).values
    ys, xs = np.nonzero(out)
    assert len(ys) >= 1
    # distance-transform ridge oracle: the ridge peak of a disk is its center
    d = distance_transform(BinaryMask(m))
    ry, rx = np.unravel_index(np.argmax(d), d.shape)
    assert (ry, rx) == (12, 12)
    assert np.max(np.sqrt((ys - ry) ** 2 + (xs - rx) ** 2)) <= 2.0


def test_skeleton_subset_and_idempotent():
    rng = np.random.default_rng(35)
    for _ in range(25):
        blob = rng.random((20, 20)) < 0.45
        blob = ndimage.binary_closing(blob)
        out1 = skeletonize(BinaryMask(blob)).values
        assert np.all(blob[out1])
        out2 = skeletonize(BinaryMask(out1)).values
        np.testing.assert_array_equal(out1, out2)


def test_skeleton_preserves_component_count():
    rng = np.random.default_rng(36)
    for _ in range(25):
        blob = rng.random((24, 24)) < 0.4
        _, n_before = ndimage.label(blob, structure=EIGHT)
        out = skeletonize(BinaryMask(blob)).values
        _, n_after = ndimage.label(out, structure=EIGHT)
        assert n_after == n_before


def test_skeleton_two_by_two_block_survives():
    # the parallel Zhang-Suen rule erases this block entirely
    m = np.zeros((6, 6), dtype=bool)
    m[2:4, 2:4] = True
    out = skeletonize(BinaryMask(m)).values
    _, n = ndimage.label(out, structure=EIGHT)
    assert n == 1
    assert np.all(m[out])
