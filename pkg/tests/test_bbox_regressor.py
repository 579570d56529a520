import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roitrack.bbox_regressor import (
    RegressorModel, apply_regressor, decode_targets, encode_targets, fit_regressor, predict_deltas,
)
from roitrack.errors import ArgumentError, DimensionError, NumericError

GT = np.array([20.0, 30.0, 60.0, 90.0])


def jitter(rng, n, scale=0.05):
    w, h = GT[2] - GT[0], GT[3] - GT[1]
    d = rng.normal(0, scale, size=(n, 4)) * np.array([w, h, w, h])
    return GT + d


def test_zero_targets():
    rng = np.random.default_rng(0)
    boxes = np.tile(GT, (20, 1))
    x = rng.standard_normal((20, 6))
    m = fit_regressor(x, boxes, GT)
    np.testing.assert_allclose(predict_deltas(m, x), 0.0, atol=1e-12)
    np.testing.assert_allclose(apply_regressor(m, x[:1], GT[None]), GT[None], atol=1e-9)


def test_ridge_limit():
    rng = np.random.default_rng(1)
    boxes = jitter(rng, 40)
    x = rng.standard_normal((40, 5))
    m = fit_regressor(x, boxes, GT, lam=1e12)
    assert np.abs(m.weights).max() < 1e-9
    np.testing.assert_allclose(predict_deltas(m, x), np.tile(encode_targets(boxes, GT).mean(0), (40, 1)), atol=1e-8)


def test_planted_linear_model():
    rng = np.random.default_rng(2)
    n, f = 60, 6
    boxes = jitter(rng, n, 0.03)
    t = encode_targets(boxes, GT)
    w_true = rng.standard_normal((f, 4))
    b_true = rng.standard_normal(4) * 0.01
    # features that map to the targets exactly under (w_true, b_true)
    x0 = rng.standard_normal((n, f))
    x = x0 + np.linalg.lstsq(w_true.T, (t - b_true - x0 @ w_true).T, rcond=None)[0].T
    np.testing.assert_allclose(x @ w_true + b_true, t, atol=1e-12)
    m = fit_regressor(x, boxes, GT, lam=1e-8)
    np.testing.assert_allclose(predict_deltas(m, x), t, atol=1e-6)


def test_unit_examples():
    b = np.array([[10.0, 10.0, 30.0, 50.0]])
    np.testing.assert_array_equal(decode_targets(b, np.zeros(4)), b)
    out = decode_targets(b, [0, 0, np.log(2.0), 0])[0]
    assert out[2] - out[0] == pytest.approx(40.0) and (out[0] + out[2]) / 2 == pytest.approx(20.0)
    out = decode_targets(b, [0.5, -0.25, 0, 0])[0]
    np.testing.assert_allclose(out, [20.0, 0.0, 40.0, 40.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.lists(st.floats(0.5, 80), min_size=2, max_size=2),
       st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.lists(st.floats(0.5, 80), min_size=2, max_size=2))
def test_round_trip(pc, ps, gc, gs):
    p = np.array([[pc[0], pc[1], pc[0] + ps[0], pc[1] + ps[1]]])
    g = np.array([[gc[0], gc[1], gc[0] + gs[0], gc[1] + gs[1]]])
    np.testing.assert_allclose(decode_targets(p, encode_targets(p, g)), g, atol=1e-9, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_decoded_boxes_stay_valid(d):
    out = decode_targets(np.array([[0.0, 0.0, 3.0, 4.0]]), np.array(d))
    assert out[0, 2] > out[0, 0] and out[0, 3] > out[0, 1]


class TestErrors:
    def test_too_few_pairs(self):
        with pytest.raises(ArgumentError):
            fit_regressor(np.zeros((7, 3)), np.tile(GT, (7, 1)), GT)

    def test_iou_gate(self):
        boxes = np.tile(GT, (10, 1))
        boxes[3] = [0, 0, 10, 10]
        with pytest.raises(ArgumentError):
            fit_regressor(np.zeros((10, 3)), boxes, GT)

    def test_singular_at_zero_lambda(self):
        with pytest.raises(NumericError):
            fit_regressor(np.ones((10, 3)), np.tile(GT, (10, 1)), GT, lam=0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            fit_regressor(np.zeros((9, 3)), np.tile(GT, (10, 1)), GT)
        m = RegressorModel(np.zeros((3, 4)), np.zeros(4), 1.0)
        with pytest.raises(DimensionError):
            predict_deltas(m, np.zeros((1, 4)))


def test_flattens_roi_features_and_serialises():
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((12, 2, 3, 3))
    m = fit_regressor(feats, jitter(rng, 12, 0.02), GT)
    assert m.feature_dim == 18
    back = RegressorModel.from_tensors(m.to_tensors())
    assert np.array_equal(back.weights, m.weights) and np.array_equal(back.bias, m.bias) and back.lam == m.lam
