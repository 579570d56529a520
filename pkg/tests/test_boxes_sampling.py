import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roitrack.boxes import (
    Box, as_box_array, center_distance, clip_boxes, corners_to_cxcywh, corners_to_xywh, cxcywh_to_corners, iou,
    iou_matrix, xywh_to_corners,
)
from roitrack.errors import ArgumentError, DegenerateBoxError, SamplingExhaustedError
from roitrack.sampling import NEGATIVE, POSITIVE, Proposal, iou_at_least, iou_below, sample_boxes

box_coords = st.tuples(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.5, 80), st.floats(0.5, 80))


def area_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


class TestIou:
    def test_examples(self):
        assert iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0
        assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
        assert iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7)

    @settings(max_examples=100, deadline=None)
    @given(a=box_coords, b=box_coords)
    def test_matches_area_formula(self, a, b):
        ba = [a[0], a[1], a[0] + a[2], a[1] + a[3]]
        bb = [b[0], b[1], b[0] + b[2], b[1] + b[3]]
        v = iou(ba, bb)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(area_iou(ba, bb), abs=1e-12)
        assert v == pytest.approx(iou(bb, ba), abs=1e-15)

    def test_matrix(self):
        a = np.array([[0, 0, 2, 2], [1, 1, 3, 3]], dtype=float)
        m = iou_matrix(a, a)
        np.testing.assert_allclose(m, [[1, 1 / 7], [1 / 7, 1]])


class TestConversions:
    @settings(max_examples=50, deadline=None)
    @given(a=box_coords)
    def test_round_trips(self, a):
        xywh = np.array([a])
        c = xywh_to_corners(xywh)
        np.testing.assert_allclose(corners_to_xywh(c), xywh, atol=1e-9)
        np.testing.assert_allclose(cxcywh_to_corners(corners_to_cxcywh(c)), c, atol=1e-9)

    def test_box_type(self):
        b = Box.from_xywh(1, 2, 3, 4)
        assert b.to_cxcywh() == (2.5, 4.0, 3, 4)
        assert Box.from_center(2.5, 4.0, 3, 4) == b
        with pytest.raises(DegenerateBoxError):
            Box(1, 1, 1, 2)
        np.testing.assert_array_equal(as_box_array(b), [[1, 2, 4, 6]])

    def test_clip_and_distance(self):
        c = clip_boxes(np.array([[-5.0, -5.0, 20.0, 8.0]]), 10, 10)
        np.testing.assert_array_equal(c, [[0, 0, 10, 8]])
        d = center_distance(np.array([[0, 0, 2, 2]]), np.array([[3, 4, 5, 6]]))
        assert d[0] == pytest.approx(5.0)


BOUNDS = np.array([0.0, 0.0, 200.0, 200.0])
GT = np.array([80.0, 70.0, 120.0, 115.0])


class TestSampling:
    def test_near_copies(self):
        b = sample_boxes(np.random.default_rng(0), GT, 20, iou_at_least(0.999), Proposal("gaussian", 1e-5, 1e-5), BOUNDS)
        np.testing.assert_allclose(b, np.tile(GT, (20, 1)), atol=0.05)

    def test_positives_replay(self):
        b = sample_boxes(np.random.default_rng(1), GT, 500, iou_at_least(0.7), POSITIVE, BOUNDS)
        assert b.shape == (500, 4)
        assert all(iou(x, GT) >= 0.7 for x in b)
        assert np.all(b[:, :2] >= 0) and np.all(b[:, 2:] <= 200)

    def test_negative_distribution(self):
        b = sample_boxes(np.random.default_rng(2), GT, 10_000, iou_below(0.5), NEGATIVE, BOUNDS, max_draws=100_000)
        vals = np.array([area_iou(x, GT) for x in b])
        assert vals.min() >= 0.0 and vals.max() < 0.5

    def test_deterministic(self):
        a = sample_boxes(np.random.default_rng(3), GT, 50, iou_below(0.3), NEGATIVE, BOUNDS)
        b = sample_boxes(np.random.default_rng(3), GT, 50, iou_below(0.3), NEGATIVE, BOUNDS)
        assert np.array_equal(a, b)

    def test_exhausted(self):
        with pytest.raises(SamplingExhaustedError):
            sample_boxes(np.random.default_rng(4), GT, 5, lambda v: v > 1.5, POSITIVE, BOUNDS, max_draws=1000)

    def test_default_budget_grows_with_count(self):
        # about 4 % of wide proposals clear a 0.7 gate, so 1000 boxes need more than 10k draws
        wide = Proposal("gaussian", 0.3, 0.3, False)
        with pytest.raises(SamplingExhaustedError):
            sample_boxes(np.random.default_rng(6), GT, 1000, iou_at_least(0.7), wide, BOUNDS, max_draws=10_000)
        b = sample_boxes(np.random.default_rng(6), GT, 1000, iou_at_least(0.7), wide, BOUNDS)
        assert len(b) == 1000

    def test_bad_args(self):
        with pytest.raises(ArgumentError):
            sample_boxes(np.random.default_rng(5), GT, 0, iou_at_least(0.7), POSITIVE, BOUNDS)
        with pytest.raises(ArgumentError):
            Proposal("cauchy")
