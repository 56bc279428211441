# -*- coding: utf-8 -*-
"""区域与关键点几何测试"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.errors import PreconditionError, ShapeError
from core.geometry import (LandmarkSet, Region, denormalize_landmarks, iou, iou_matrix,
                           landmark_extent_box, nms, normalize_landmarks)

coords = st.floats(-200, 200, allow_nan=False)
extents = st.floats(0.5, 150, allow_nan=False)
regions = st.builds(Region, coords, coords, extents, extents)


@settings(max_examples=200, deadline=None)
@given(a=regions, b=regions)
def test_iou_symmetric_and_bounded(a, b):
    value = iou(a, b)
    assert 0.0 <= value <= 1.0
    assert value == pytest.approx(iou(b, a), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(a=regions)
def test_iou_self_is_one(a):
    assert iou(a, a) == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(a=regions, b=regions, scale=st.sampled_from([0.125, 0.5, 2.0, 8.0]))
def test_iou_scale_invariant(a, b, scale):
    def scaled(r):
        return Region(r.x * scale, r.y * scale, r.w * scale, r.h * scale)

    assert iou(scaled(a), scaled(b)) == pytest.approx(iou(a, b), abs=1e-12)


def test_iou_known_values():
    a = Region.from_corners(0, 0, 10, 10)
    assert iou(a, Region.from_corners(5, 0, 15, 10)) == pytest.approx(50 / 150)
    assert iou(a, Region.from_corners(10, 0, 20, 10)) == 0.0


def test_iou_matrix_matches_pairwise():
    boxes = [Region(5, 5, 10, 10), Region(8, 8, 10, 6), Region(50, 50, 4, 4)]
    matrix = iou_matrix(boxes, boxes[::-1])
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes[::-1]):
            assert matrix[i, j] == iou(a, b)


def test_region_rejects_non_positive_extent():
    with pytest.raises(PreconditionError):
        Region(0, 0, 0, 5)


@settings(max_examples=100, deadline=None)
@given(region=regions, seed=st.integers(0, 2 ** 16))
def test_normalize_denormalize_inverse(region, seed):
    rng = np.random.default_rng(seed)
    lm = LandmarkSet(rng.uniform(-100, 100, (5, 2)), rng.integers(0, 2, 5))
    back = denormalize_landmarks(region, normalize_landmarks(region, lm))
    np.testing.assert_allclose(back.points, lm.points, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(back.visibility, lm.visibility)


@settings(max_examples=100, deadline=None)
@given(region=regions, dx=coords, dy=coords, scale=st.floats(0.1, 10), seed=st.integers(0, 2 ** 16))
def test_normalize_translation_and_scale_invariant(region, dx, dy, scale, seed):
    rng = np.random.default_rng(seed)
    points = rng.uniform(-100, 100, (5, 2))
    lm = LandmarkSet(points, np.ones(5))
    base = normalize_landmarks(region, lm).coords

    moved = Region(region.x + dx, region.y + dy, region.w, region.h)
    shifted = normalize_landmarks(moved, LandmarkSet(points + [dx, dy], np.ones(5))).coords
    np.testing.assert_allclose(shifted, base, rtol=1e-9, atol=1e-9)

    center = np.array([region.x, region.y])
    grown = Region(region.x, region.y, region.w * scale, region.h * scale)
    zoomed = normalize_landmarks(grown, LandmarkSet(center + scale * (points - center), np.ones(5))).coords
    np.testing.assert_allclose(zoomed, base, rtol=1e-9, atol=1e-9)


def test_normalize_known_value():
    nlm = normalize_landmarks(Region(10, 10, 20, 20), LandmarkSet([[20, 15]], [1]))
    np.testing.assert_allclose(nlm.coords, [[0.5, 0.25]])
    np.testing.assert_allclose(denormalize_landmarks(Region(10, 10, 20, 20), nlm).points, [[20, 15]])


def test_landmark_set_length_mismatch():
    with pytest.raises(ShapeError):
        LandmarkSet(np.zeros((3, 2)), np.ones(2))


class TestExtentBox:
    def test_padding_and_square(self):
        lm = LandmarkSet([[10, 10], [30, 20], [0, 0]], [1, 1, 0])
        box = landmark_extent_box(lm, pad=1.5)
        assert (box.x, box.y, box.w, box.h) == (20.0, 15.0, 30.0, 15.0)
        square = landmark_extent_box(lm, pad=1.5, square=True)
        assert square.w == square.h == 30.0

    def test_zero_extent_floored_to_one_pixel(self):
        box = landmark_extent_box(LandmarkSet([[5, 5], [5, 9]], [1, 1]))
        assert box.w == 1.0 and box.h == 4.0

    def test_needs_two_visible_points(self):
        with pytest.raises(PreconditionError):
            landmark_extent_box(LandmarkSet([[5, 5], [5, 9]], [1, 0]))


def _brute_nms(regions_, scores, overlap):
    order = sorted(range(len(regions_)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou(regions_[i], regions_[k]) <= overlap for k in keep):
            keep.append(i)
    return keep


@settings(max_examples=100, deadline=None)
@given(boxes=st.lists(st.builds(Region, st.floats(0, 60), st.floats(0, 60),
                                st.floats(4, 30), st.floats(4, 30)), max_size=12),
       data=st.data(), overlap=st.sampled_from([0.0, 0.3, 0.5]))
def test_nms_matches_brute_force(boxes, data, overlap):
    scores = data.draw(st.lists(st.sampled_from([0.1, 0.5, 0.9]), min_size=len(boxes), max_size=len(boxes)))
    assert nms(boxes, scores, overlap) == _brute_nms(boxes, scores, overlap)


@settings(max_examples=100, deadline=None)
@given(boxes=st.lists(st.builds(Region, st.floats(0, 60), st.floats(0, 60),
                                st.floats(4, 30), st.floats(4, 30)), max_size=12),
       data=st.data(), overlap=st.sampled_from([0.0, 0.3, 0.5]))
def test_nms_permutation_invariant(boxes, data, overlap):
    scores = data.draw(st.lists(st.floats(0, 1), min_size=len(boxes), max_size=len(boxes), unique=True))
    perm = data.draw(st.permutations(range(len(boxes))))
    kept = nms(boxes, scores, overlap)
    kept_permuted = nms([boxes[i] for i in perm], [scores[i] for i in perm], overlap)
    assert [perm[k] for k in kept_permuted] == kept


def test_nms_length_mismatch():
    with pytest.raises(ShapeError):
        nms([Region(0, 0, 1, 1)], [0.1, 0.2], 0.3)
