import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roitrack import tensor_core as tc
from roitrack.errors import ArgumentError, DimensionError
from roitrack.multidomain_head import (
    head_backward, head_forward, init_head_params, loss_cls, loss_cls_grad, loss_inst, loss_inst_grad, loss_total,
    n_domains, one_hot_labels, positive_prob, softmax_cls, softmax_inst,
)


def params_for(d, fi=6, width=5, seed=0):
    return init_head_params(fi, width, d, np.random.default_rng(seed))


class TestForward:
    def test_single_branch_shape(self):
        f = head_forward(np.ones((4, 6)), params_for(1))
        assert f.shape == (4, 2, 1)

    def test_zero_params(self):
        p = {k: np.zeros_like(v) for k, v in params_for(3).items()}
        assert not head_forward(np.ones((2, 6)), p).any()

    def test_branches_match_single_branch_forward(self):
        p = params_for(3, seed=1)
        p["fc6.b"] = np.arange(6.0).reshape(3, 2)
        x = np.random.default_rng(2).standard_normal((5, 6))
        f = head_forward(x, p)
        for d in range(3):
            single = dict(p, **{"fc6.W": p["fc6.W"][d:d + 1], "fc6.b": p["fc6.b"][d:d + 1]})
            np.testing.assert_allclose(f[:, :, d:d + 1], head_forward(x, single), atol=1e-14)
        # explicit fc4 -> relu -> fc5 -> relu -> fc6 for one sample
        h = np.maximum(0, p["fc4.W"] @ x[0] + p["fc4.b"])
        h = np.maximum(0, p["fc5.W"] @ h + p["fc5.b"])
        np.testing.assert_allclose(f[0, :, 2], p["fc6.W"][2] @ h + p["fc6.b"][2], atol=1e-14)

    def test_accepts_spatial_features(self):
        p = params_for(2, fi=2 * 3 * 3)
        x = np.random.default_rng(3).standard_normal((4, 2, 3, 3))
        np.testing.assert_array_equal(head_forward(x, p), head_forward(x.reshape(4, -1), p))
        with pytest.raises(DimensionError):
            head_forward(np.ones((4, 7)), p)
        assert n_domains(p) == 2


class TestSoftmax:
    def test_cls_values(self):
        s = softmax_cls(np.array([[0.0, 2.0], [0.0, 0.0]]))
        np.testing.assert_allclose(s[:, 0], [0.5, 0.5])
        np.testing.assert_allclose(s[:, 1], [0.88079708, 0.11920292], atol=1e-8)
        np.testing.assert_allclose(s[:, 1], [1 / (1 + math.exp(-2)), 1 / (1 + math.exp(2))], atol=1e-15)

    def test_inst_values(self):
        assert np.all(softmax_inst(np.array([[3.0], [-1.0]])) == 1.0)
        np.testing.assert_allclose(softmax_inst(np.full((2, 4), 0.7)), 0.25)
        s = softmax_inst(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(s[0], e / e.sum(), atol=1e-15)
        np.testing.assert_allclose(s[0], [0.09003057, 0.24472847, 0.66524096], atol=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), c=st.floats(-50, 50))
    def test_shift_invariance_and_normalisation(self, seed, c):
        f = np.random.default_rng(seed).standard_normal((2, 4)) * 5
        s = softmax_cls(f)
        np.testing.assert_allclose(s.sum(axis=0), 1.0, atol=1e-12)
        g = f.copy()
        g[:, 1] += c
        np.testing.assert_allclose(softmax_cls(g), s, atol=1e-12)
        h = f.copy()
        h[0] += c
        np.testing.assert_allclose(softmax_inst(h)[0], softmax_inst(f)[0], atol=1e-12)

    def test_stable_for_large_scores(self):
        assert np.all(np.isfinite(softmax_cls(np.array([[1000.0], [-1000.0]]))))


def explicit_cls(f, labels, d):
    total = 0.0
    for i in range(f.shape[0]):
        c = 0 if labels[i] == 1 else 1
        total -= math.log(math.exp(f[i, c, d]) / (math.exp(f[i, 0, d]) + math.exp(f[i, 1, d])))
    return total / f.shape[0]


class TestLosses:
    def test_cls_zero_scores(self):
        assert loss_cls(np.zeros((5, 2, 3)), np.array([1, 0, 1, 1, 0]), 2) == pytest.approx(math.log(2))

    def test_cls_confident(self):
        f = np.zeros((2, 2, 1))
        f[0, 0, 0], f[1, 1, 0] = 40.0, 40.0
        assert loss_cls(f, np.array([1, 0]), 0) < 1e-15

    def test_cls_explicit_sum(self):
        rng = np.random.default_rng(4)
        f = rng.standard_normal((6, 2, 3))
        labels = rng.integers(0, 2, 6)
        assert loss_cls(f, labels, 1) == pytest.approx(explicit_cls(f, labels, 1), abs=1e-12)
        y = one_hot_labels(labels, 1, 3)
        assert y.sum() == 6 and np.all(y[:, :, [0, 2]] == 0)

    def test_inst_negatives_only(self):
        f = np.random.default_rng(5).standard_normal((4, 2, 3))
        loss, g = loss_inst_grad(f, np.zeros(4, dtype=int), 1)
        assert loss == 0.0 and not g.any()

    def test_inst_single_domain_subset(self):
        f = np.random.default_rng(6).standard_normal((3, 2, 4))
        assert loss_inst(f, np.array([1, 1, 0]), 2, [2]) == pytest.approx(0.0, abs=1e-15)

    def test_inst_value(self):
        f = np.zeros((1, 2, 3))
        f[0, 0] = [1.0, 2.0, 3.0]
        val = loss_inst(f, np.array([1]), 2, [0, 1, 2])
        assert val == pytest.approx(-math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3))), abs=1e-12)
        assert val == pytest.approx(0.40760596, abs=1e-8)

    def test_inst_domain_must_be_in_subset(self):
        with pytest.raises(ArgumentError):
            loss_inst(np.zeros((1, 2, 3)), np.array([1]), 0, [1, 2])

    def test_inst_monotone_in_true_score(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            f = rng.standard_normal((3, 2, 4))
            labels = np.array([1, 1, 0])
            base = loss_inst(f, labels, 1)
            g = f.copy()
            g[0, 0, 1] += rng.uniform(0.01, 2.0)
            assert loss_inst(g, labels, 1) < base

    def test_total(self):
        assert loss_total(0.5, 0.4, 0.1) == pytest.approx(0.54)
        assert loss_total(0.5, 0.4, 0.0) == 0.5
        with pytest.raises(ArgumentError):
            loss_total(0.5, 0.4, -0.1)

    def test_default_alpha(self):
        assert loss_total(1.0, 1.0) == pytest.approx(1.1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_total_loss_gradients_match_fd(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    p = params_for(d, fi=5, width=4, seed=seed)
    for k in p:
        p[k] = p[k] + 0.2 * rng.standard_normal(p[k].shape)
    x = rng.standard_normal((6, 5))
    labels = np.array([1, 1, 1, 0, 0, 0])
    dom = int(rng.integers(0, d))

    def total():
        f = head_forward(x, p)
        return loss_total(loss_cls(f, labels, dom), loss_inst(f, labels, dom), 0.1)

    f, cache = head_forward(x, p, keep_cache=True)
    _, gc = loss_cls_grad(f, labels, dom)
    _, gi = loss_inst_grad(f, labels, dom)
    grads, _ = head_backward(gc + 0.1 * gi, cache, p)
    for k in p:
        assert tc.relative_error(grads[k], tc.numerical_gradient(total, p[k])) < 1e-4


def test_positive_prob():
    f = np.array([[[2.0], [0.0]]])
    assert positive_prob(f)[0] == pytest.approx(0.88079708, abs=1e-8)
