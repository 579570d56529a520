import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import extent_chain, receptive_chain
from roitrack import backbone as bb
from roitrack.errors import DimensionError

# the default kernel plan written out by hand: (kernel, stride, dilation, pad)
ORIGINAL_LAYERS = [(7, 2, 1, 0), (3, 2, 1, 0), (5, 2, 1, 1), (3, 2, 1, 0), (3, 1, 1, 0)]
DENSE_LAYERS = [(7, 2, 1, 0), (3, 2, 1, 0), (5, 2, 1, 1), (3, 1, 3, 0)]


class TestGeometry:
    def test_dense_receptive_field_is_75(self):
        cfg = bb.BackboneConfig.full()
        assert bb.receptive_field(cfg) == 75
        assert receptive_chain([(k, s, d) for k, s, d, _ in DENSE_LAYERS]) == 75

    def test_original_receptive_field_matches_chain(self):
        cfg = bb.BackboneConfig.full(variant="original")
        assert bb.receptive_field(cfg) == receptive_chain([(k, s, d) for k, s, d, _ in ORIGINAL_LAYERS])

    def test_strides(self):
        dense, orig = bb.BackboneConfig.toy(), bb.BackboneConfig.toy(variant="original")
        assert bb.feature_stride(dense) * 2 == bb.feature_stride(orig)
        assert (bb.feature_stride(dense), bb.feature_stride(orig)) == (8, 16)

    def test_extent_on_107(self):
        dense, orig = bb.BackboneConfig.toy(), bb.BackboneConfig.toy(variant="original")
        assert bb.output_extent(dense, 107) == extent_chain(107, DENSE_LAYERS)
        assert bb.output_extent(orig, 107) == extent_chain(107, ORIGINAL_LAYERS)
        assert bb.output_extent(dense, 107) == 2 * bb.output_extent(orig, 107)

    def test_plans(self):
        dense = bb.layer_plan(bb.BackboneConfig.toy())
        orig = bb.layer_plan(bb.BackboneConfig.toy(variant="original"))
        assert [layer.name for layer in dense] == ["conv1", "pool1", "conv2", "conv3"]
        assert [layer.name for layer in orig] == ["conv1", "pool1", "conv2", "pool2", "conv3"]
        assert dense[-1].dilation == 3 and orig[-1].dilation == 1

    @pytest.mark.parametrize("variant", ["dense", "original"])
    def test_forward_shape_matches_extent(self, variant):
        cfg = bb.BackboneConfig.toy(variant=variant)
        params = bb.init_params(cfg, np.random.default_rng(0))
        for side in (75, 107, 130):
            y = bb.forward_features(np.zeros((3, side, side + 9)), params, cfg)
            assert y.shape == (32, bb.output_extent(cfg, side), bb.output_extent(cfg, side + 9))

    @pytest.mark.parametrize("variant", ["dense", "original"])
    def test_offset_is_receptive_centre(self, variant):
        # an impulse at input pixel p only reaches nodes whose field covers p;
        # node 0's field of width rf is centred on the offset
        cfg = bb.BackboneConfig(variant=variant, channels=(1, 1, 1), init_gain=1.0)
        params = {k: np.abs(v) + 0.1 if k.endswith(".W") else v for k, v in bb.init_params(cfg, np.random.default_rng(1)).items()}
        rf = bb.receptive_field(cfg)
        side = rf + 40
        hits = []
        for p in range(side):
            x = np.zeros((3, side, side))
            x[:, p, :] = 1.0
            hits.append(bb.forward_features(x, params, cfg)[0, 0, 0] > 0)
        covered = np.flatnonzero(hits)
        assert covered.size == covered.max() - covered.min() + 1
        # the near edge of the field can sit in the padding, so measure from the far edge
        assert covered.max() + 1 - rf / 2 == pytest.approx(bb.feature_offset(cfg))


class TestForward:
    def test_zero_input_zero_bias(self):
        cfg = bb.BackboneConfig.toy()
        params = bb.init_params(cfg, np.random.default_rng(2))
        assert not bb.forward_features(np.zeros((3, 107, 107)), params, cfg).any()

    def test_too_small(self):
        cfg = bb.BackboneConfig.toy()
        params = bb.init_params(cfg, np.random.default_rng(3))
        with pytest.raises(DimensionError):
            bb.forward_features(np.zeros((3, 74, 120)), params, cfg)
        with pytest.raises(DimensionError):
            bb.forward_features(np.zeros((1, 107, 107)), params, cfg)

    def test_deterministic(self):
        cfg = bb.BackboneConfig.toy()
        params = bb.init_params(cfg, np.random.default_rng(4))
        x = np.random.default_rng(5).standard_normal((3, 90, 100))
        assert np.array_equal(bb.forward_features(x, params, cfg), bb.forward_features(x.copy(), params, cfg))

    def test_init_is_seeded(self):
        cfg = bb.BackboneConfig.toy()
        a = bb.init_params(cfg, np.random.default_rng(6))
        b = bb.init_params(cfg, np.random.default_rng(6))
        assert all(np.array_equal(a[k], b[k]) for k in a)
        bound = cfg.init_gain * math.sqrt(6.0 / (3 * 49))
        assert np.abs(a["conv1.W"]).max() <= bound


class TestPrepareInput:
    def test_unit_scale_union(self):
        frame = np.random.default_rng(7).random((200, 220, 3))
        target = [50, 40, 157, 147]
        samples = np.array([[45.0, 30.0, 160.0, 150.0], [60.0, 35.0, 170.0, 140.0]])
        crop, tr = bb.prepare_input(frame, target, samples)
        assert tr.scale == pytest.approx(1.0)
        assert crop.shape == (3, 120, 125)
        assert (tr.x0, tr.y0) == (45.0, 30.0)
        np.testing.assert_allclose(crop[:, 0, 0], frame[30, 45] * 255 - 128, atol=1e-9)

    def test_half_scale(self):
        frame = np.zeros((400, 400, 3))
        _, tr = bb.prepare_input(frame, [10, 10, 224, 224], [[10, 10, 224, 224]])
        assert tr.scale == pytest.approx(0.5)

    def test_zero_beyond_frame(self):
        frame = np.full((50, 50, 3), 1.0)
        crop, tr = bb.prepare_input(frame, [0, 0, 107, 107], [[-30, -30, 20, 20]])
        assert np.all(crop[:, :20, :20] == 0.0)
        assert np.all(crop[:, 35:, 35:] == 127.0)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_transform_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        target = np.r_[rng.uniform(0, 100, 2), 0.0, 0.0]
        target[2:] = target[:2] + rng.uniform(5, 200, 2)
        _, tr = bb.prepare_input(np.zeros((40, 40, 3)), target, target[None], margin=3.0)
        boxes = rng.uniform(-50, 300, size=(5, 4))
        boxes[:, 2:] = boxes[:, :2] + rng.uniform(1, 100, size=(5, 2))
        np.testing.assert_allclose(tr.to_original(tr.to_crop(boxes)), boxes, atol=1e-9)

    def test_matches_interpolation_oracle(self):
        from scipy import ndimage

        rng = np.random.default_rng(8)
        frame = rng.random((37, 41, 3))
        target = [5.0, 7.0, 25.0, 22.0]
        crop, tr = bb.prepare_input(frame, target, [[3.0, 4.0, 30.0, 26.0]], margin=6.0)
        img = bb.normalize_frame(frame)
        s = tr.scale
        for ch in range(3):
            padded = np.pad(img[:, :, ch], 1)
            ys, xs = np.meshgrid(np.arange(crop.shape[1]), np.arange(crop.shape[2]), indexing="ij")
            src_y = (ys + 0.5 + tr.y0) / s - 0.5 + 1
            src_x = (xs + 0.5 + tr.x0) / s - 0.5 + 1
            ref = ndimage.map_coordinates(padded, [src_y, src_x], order=1, mode="constant", cval=0.0)
            np.testing.assert_allclose(crop[ch], ref, atol=1e-9)
