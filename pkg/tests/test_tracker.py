import copy

import numpy as np
import pytest
from scipy.stats import spearmanr

from roitrack import tensor_core as tc
from roitrack.boxes import iou_many
from roitrack.errors import ConfigError, StateError
from roitrack.eval_harness.synthetic import SyntheticSpec, generate_sequence, tier_spec
from roitrack.multidomain_head import POS
from roitrack.network import NetworkConfig, init_network
from roitrack.tracker import (
    HardBatch, SampleMemory, _context_window, TargetState, Tracker, TrackerConfig, hard_minibatch, long_update_frames, run_sequence,
)

NET = NetworkConfig.toy()
CFG = TrackerConfig.toy()
CONV_KEYS = ("conv1.W", "conv1.b", "conv2.W", "conv2.b", "conv3.W", "conv3.b")


@pytest.fixture(scope="module")
def params():
    return init_network(NET, 3, np.random.default_rng(0))


@pytest.fixture(scope="module")
def seq():
    return generate_sequence(tier_spec("linear", 0, 24), 1)


def started(params, seq, cfg=CFG, seed=0):
    tr = Tracker(params, NET, cfg, seed)
    tr.init_first_frame(seq.frame(0), seq.gt[0])
    return tr


def constant_head(tr, p):
    """Make every candidate score exactly ``p``."""
    tr.model.params["fc6.W"] = np.zeros_like(tr.model.params["fc6.W"])
    b = np.zeros((1, 2))
    b[0, POS], b[0, 1 - POS] = np.log(p), np.log(1 - p)
    tr.model.params["fc6.b"] = b


class TestConfig:
    def test_defaults(self):
        c = TrackerConfig()
        assert (c.n_candidates, c.trans_std, c.scale_step, c.success_threshold) == (256, 0.3, 1.05, 0.5)
        assert (c.init_pos, c.init_neg, c.update_pos, c.update_neg) == (500, 5000, 50, 200)
        assert (c.update_pos_iou, c.update_neg_iou, c.mining_pool, c.batch_neg, c.batch_pos) == (0.7, 0.3, 1024, 96, 32)
        assert (c.long_interval, c.t_long, c.t_short, c.init_iters, c.update_iters) == (10, 100, 20, 50, 15)
        assert (c.lr_init, c.lr_update, c.fc6_lr_mult) == (0.0003, 0.0003, 10.0)

    @pytest.mark.parametrize("kw", [dict(n_candidates=0), dict(update_neg_iou=0.8), dict(t_short=200),
                                    dict(mining_pool=10)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrackerConfig(**kw)


def test_state_scale_clamped():
    assert TargetState(0, 0, 100).scale == 8.0 and TargetState(0, 0, 1e-3).scale == 0.125
    s = TargetState.from_box([10, 20, 30, 60], (20, 40))
    assert (s.cx, s.cy, s.scale) == (20, 40, 1.0)
    np.testing.assert_allclose(s.box((20, 40)), [10, 20, 30, 60])


class TestInit:
    def test_convs_frozen_and_gt_beats_background(self, params, seq):
        tr = started(params, seq)
        for k in CONV_KEYS:
            assert np.array_equal(tr.model.params[k], params[k])
        assert tr.model.params["fc6.W"].shape[0] == 1
        gt = seq.gt[0]
        far = np.array([2.0, 2.0, 2.0 + gt[2] - gt[0], 2.0 + gt[3] - gt[1]])
        if iou_many(far[None], gt)[0] > 0:
            far = np.array([128 - (gt[2] - gt[0]) - 2, 128 - (gt[3] - gt[1]) - 2, 126, 126])
        ff = tr.extractor.frame_features(seq.frame(0), gt, np.stack([gt, far]), tr.model.params)
        s = tr.score(ff.features)
        assert s[0] > s[1]

    @pytest.mark.parametrize("s", range(3))
    def test_init_loss_trend(self, s):
        p = init_network(NET, 3, np.random.default_rng(s))
        sq = generate_sequence(tier_spec("linear", s, 2), 1)
        tr = started(p, sq, seed=s)
        blocks = np.array(tr.model.losses).reshape(-1, 5).mean(axis=1)
        assert len(tr.model.losses) == 50
        assert blocks[-1] < blocks[0]
        assert spearmanr(np.arange(len(blocks)), blocks)[0] <= -0.9

    def test_first_frame_memory_subset(self, params, seq):
        tr = started(params, seq)
        assert tr.memory.frames == [0] and tr.memory.n_pos == 50 and tr.memory.n_neg == 200


class TestTrackFrame:
    def test_stationary_limit(self, params):
        spec = SyntheticSpec(length=3)
        sq = generate_sequence(spec, 0)
        tr = started(params, sq, CFG.with_(trans_std=0.0, scale_clip=0.0, bbr=False))
        prev = tr.state
        state, _, _ = tr.track_frame(sq.frame(1), 1)
        assert state.cx == pytest.approx(prev.cx, abs=1e-9) and state.cy == pytest.approx(prev.cy, abs=1e-9)
        assert state.scale == pytest.approx(prev.scale, abs=1e-12)

    def test_batch_argmax_equals_one_at_a_time(self, params, seq):
        tr = started(params, seq, CFG.with_(bbr=False))
        twin = copy.deepcopy(tr)
        frame = seq.frame(1)
        tr.track_frame(frame, 1)
        cand, valid = twin.draw_candidates(twin.state, frame)
        cand = cand[valid]
        prev_box = twin.state.box(twin.model.base_size)
        context = _context_window(prev_box, frame, twin.config.context)
        ff = twin.extractor.frame_features(frame, prev_box, cand, twin.model.params, cover=context[None])
        one = [twin.score(ff.extract(b[None], NET))[0] for b in cand]
        np.testing.assert_array_equal(cand[int(np.argmax(one))], tr.last_raw)

    def test_gate_reports_raw_box(self, params, seq):
        tr = started(params, seq)
        assert tr.model.regressor is not None
        constant_head(tr, 0.3)
        _, f, reported = tr.track_frame(seq.frame(1), 1)
        assert f <= 0.5
        np.testing.assert_array_equal(reported, tr.last_raw)

    def test_failure_keeps_last_confident_and_skips_collection(self, params, seq):
        tr = started(params, seq)
        before = tr.state
        constant_head(tr, 0.4)
        state, f, _ = tr.track_frame(seq.frame(1), 1)
        assert f == pytest.approx(0.4)
        assert state == before and tr.memory.frames == [0]
        assert tr.short_updates == [1]

    def test_regression_applied_on_success(self, params, seq):
        tr = started(params, seq)
        constant_head(tr, 0.9)
        _, f, reported = tr.track_frame(seq.frame(1), 1)
        assert f > 0.5 and not np.array_equal(reported, tr.last_raw)

    def test_collected_samples_replay(self, params, seq):
        tr = started(params, seq)
        constant_head(tr, 0.9)
        tr.track_frame(seq.frame(1), 1)
        pos, neg = tr.last_collected
        assert len(pos) == 50 and len(neg) == 200
        assert np.all(iou_many(pos, tr.last_raw) > 0.7) and np.all(iou_many(neg, tr.last_raw) < 0.3)
        assert tr.memory.frames == [0, 1] and len(tr.memory) <= 2 * 250

    def test_not_initialised(self, params):
        with pytest.raises(StateError):
            Tracker(params, NET).track_frame(np.zeros((64, 64, 3)))

    def test_frames_must_advance(self, params, seq):
        tr = started(params, seq)
        tr.track_frame(seq.frame(1), 1)
        with pytest.raises(StateError):
            tr.track_frame(seq.frame(1), 1)

    def test_candidates_keep_size_inside_frame(self, params, seq):
        tr = started(params, seq)
        tr.state = TargetState(3.0, 120.0, 1.0)
        cand, valid = tr.draw_candidates(tr.state, seq.frame(1))
        w0, h0 = tr.model.base_size
        assert np.all(cand[:, :2] >= 0) and np.all(cand[:, 2] <= 128) and np.all(cand[:, 3] <= 128)
        ratio = (cand[:, 2] - cand[:, 0]) / w0
        np.testing.assert_allclose(ratio, (cand[:, 3] - cand[:, 1]) / h0)
        assert 0 < valid.sum() < len(valid)

    def test_candidates_off_frame_recovered(self, params, seq):
        tr = started(params, seq, CFG.with_(bbr=False))
        tr.state = TargetState(-400.0, -400.0, 1.0)
        tr.last_confident = tr.state
        state, _, raw = tr.track_frame(seq.frame(1), 1)
        assert raw[2] - raw[0] >= 1 and raw[3] - raw[1] >= 1


class TestMemory:
    def test_horizons(self):
        m = SampleMemory(t_long=100, t_short=20)
        for t in range(0, 130, 5):
            m.add(t, np.ones((50, 1)), np.ones((200, 1)))
            assert all(t - f < 100 for f, p in zip(m.frames, m.pos) if len(p))
            assert all(t - f < 20 for f, n in zip(m.frames, m.neg) if len(n))
            assert len(m) <= 250 * 100
        assert m.frames == sorted(m.frames)
        assert m.positives(125, 20).shape[0] == 4 * 50 and m.negatives(125, 20).shape[0] == 4 * 200

    def test_bookkeeping_before_eviction(self):
        m = SampleMemory(100, 100)
        for k in range(1, 6):
            m.add(k, np.ones((50, 1)), np.ones((200, 1)))
            assert len(m) <= k * 250

    def test_order_enforced(self):
        m = SampleMemory(10, 5)
        m.add(3, np.ones((1, 1)), np.ones((1, 1)))
        with pytest.raises(StateError):
            m.add(3, np.ones((1, 1)), np.ones((1, 1)))

    def test_memory_bound_during_run(self, params):
        sq = generate_sequence(tier_spec("static", 0, 30), 2)
        cfg = CFG.with_(t_long=10, t_short=5, bbr=False)
        tr = started(params, sq, cfg)
        for t in range(1, len(sq)):
            tr.track_frame(sq.frame(t), t)
            assert len(tr.memory) <= 250 * cfg.t_long
            assert all(t - f < cfg.t_long for f, p in zip(tr.memory.frames, tr.memory.pos) if len(p))


class TestHardMining:
    def feats(self, rng, n):
        return rng.standard_normal((n, NET.backbone.channels[-1], 3, 3))

    def head(self, params):
        p = dict(params)
        p["fc6.W"] = p["fc6.W"][:1]
        p["fc6.b"] = p["fc6.b"][:1]
        return p

    def test_counts_and_saturation(self, params):
        rng = np.random.default_rng(1)
        neg = self.feats(rng, 96)
        hb = hard_minibatch(self.feats(rng, 10), neg, self.head(params), CFG, rng)
        assert hb.pos.shape[0] == 32 and hb.neg.shape[0] == 96
        assert np.array_equal(hb.neg, neg)

    def test_padding_below_batch(self, params):
        rng = np.random.default_rng(2)
        hb = hard_minibatch(self.feats(rng, 40), self.feats(rng, 30), self.head(params), CFG, rng)
        assert hb.pos.shape[0] == 32 and hb.neg.shape[0] == 96

    @pytest.mark.parametrize("n_neg", [500, 1024, 3000])
    def test_top_k_matches_sort_oracle(self, params, n_neg):
        rng = np.random.default_rng(n_neg)
        neg = self.feats(rng, n_neg)
        hb = hard_minibatch(self.feats(rng, 64), neg, self.head(params), CFG, rng)
        assert hb.pos.shape[0] == 32 and hb.neg.shape[0] == 96
        assert len(hb.pool_scores) == min(n_neg, 1024)
        oracle = sorted(range(len(hb.pool_scores)), key=lambda i: (-hb.pool_scores[i], i))[:96]
        assert list(hb.selected) == oracle
        rest = np.setdiff1d(np.arange(len(hb.pool_scores)), hb.selected)
        assert hb.pool_scores[hb.selected].min() >= hb.pool_scores[rest].max()

    def test_empty_memory(self, params):
        with pytest.raises(StateError):
            hard_minibatch(None, np.zeros((5, 1)), params, CFG, np.random.default_rng(0))


class TestSchedule:
    def test_long_update_frames(self):
        assert long_update_frames(35) == [10, 20, 30]

    def test_run_fires_on_schedule_with_one_pass_per_frame(self, params):
        sq = generate_sequence(tier_spec("linear", 1, 35), 3)
        res = run_sequence(sq, params, NET, CFG.with_(bbr=False), seed=0)
        assert res.long_updates == [10, 20, 30]
        assert res.forward_passes == len(sq)
        assert sq.accessed == list(range(len(sq)))

    def test_updates_leave_convs(self, params, seq):
        tr = started(params, seq)
        for t in range(1, 11):
            tr.track_frame(seq.frame(t), t)
        tr.update_model("short", 10)
        assert tr.long_updates == [10]
        for k in CONV_KEYS:
            assert np.array_equal(tr.model.params[k], params[k])


def test_run_is_bitwise_reproducible(params, tmp_path):
    sq = generate_sequence(tier_spec("scale", 0, 15), 4)
    a = run_sequence(sq, params, NET, CFG, seed=5, results_path=tmp_path / "a.txt", session_path=tmp_path / "a.ckpt")
    b = run_sequence(sq, params, NET, CFG, seed=5, results_path=tmp_path / "b.txt", session_path=tmp_path / "b.ckpt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert np.array_equal(a.boxes, b.boxes)
    session = tc.load_checkpoint(tmp_path / "a.ckpt")
    assert {"online.fc6.W", "bbr.W", "bbr.b", "bbr.lambda"} <= set(session)
