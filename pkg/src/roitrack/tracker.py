"""Online tracking: candidate scoring, sample memory, hard mining and model updates.

Per frame the tracker draws candidate states around the previous estimate,
computes one feature map for a crop that encloses every candidate (plus a
context window for later sample collection), scores all candidates with the
fully connected head and keeps the best one. Training samples for online
updates are read off the same feature map after the estimate is known.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .bbox_regressor import RegressorModel, apply_regressor, fit_regressor
from .boxes import as_box_array, clip_boxes, corners_to_cxcywh, cxcywh_to_corners, iou_many
from .errors import ArgumentError, ConfigError, StateError
from .multidomain_head import HEAD_KEYS, head_backward, head_forward, loss_cls_grad, new_branches, positive_prob
from .network import FeatureExtractor, FrameFeatures, NetworkConfig
from .sampling import MIN_SIDE, Proposal, iou_above, iou_at_least, iou_below, sample_boxes
from .sequences import Sequence, write_results

MIN_SCALE = 1.0 / 8.0
MAX_SCALE = 8.0


@dataclass(frozen=True)
class TrackerConfig:
    n_candidates: int = 256
    trans_std: float = 0.3            # candidate centre std, fraction of the first-frame mean side
    scale_step: float = 1.05
    scale_clip: float = 2.0           # scale exponent u ~ N(0, 1) clipped to [-clip, clip]
    success_threshold: float = 0.5
    init_pos: int = 500
    init_neg: int = 5000
    init_pos_iou: float = 0.7
    init_neg_iou: float = 0.5
    update_pos: int = 50
    update_neg: int = 200
    update_pos_iou: float = 0.7
    update_neg_iou: float = 0.3
    batch_pos: int = 32
    batch_neg: int = 96
    mining_pool: int = 1024
    long_interval: int = 10
    t_long: int = 100
    t_short: int = 20
    init_iters: int = 50
    update_iters: int = 15
    lr_init: float = 0.0003
    lr_update: float = 0.0003
    fc6_lr_mult: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    bbr: bool = True
    bbr_samples: int = 1000
    bbr_iou: float = 0.6
    bbr_lambda: float = 1000.0
    top_k: int = 1                    # 1 = argmax; 5 = mean of the top five boxes
    context: float = 2.5              # side of the collection window, in target sides
    neg_proposal: Proposal = Proposal("mixed", 0.5, 0.5)
    pos_proposal: Proposal = Proposal("gaussian", 0.1, 0.2)

    def __post_init__(self):
        counts = ("n_candidates", "init_pos", "init_neg", "update_pos", "update_neg", "batch_pos",
                  "batch_neg", "mining_pool", "long_interval", "t_long", "t_short", "top_k")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.init_iters < 0 or self.update_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if not (0 <= self.update_neg_iou < self.update_pos_iou <= 1):
            raise ConfigError("update IoU gates must satisfy 0 <= neg < pos <= 1")
        if not (0 <= self.init_neg_iou < self.init_pos_iou <= 1):
            raise ConfigError("init IoU gates must satisfy 0 <= neg < pos <= 1")
        if self.mining_pool < self.batch_neg:
            raise ConfigError("mining pool must hold at least one batch of negatives")
        if self.t_short > self.t_long:
            raise ConfigError("t_short must not exceed t_long")
        if self.scale_step <= 1 or self.trans_std < 0 or self.context < 1:
            raise ConfigError("invalid candidate spread or context")

    @classmethod
    def toy(cls, **kw) -> "TrackerConfig":
        """Cheaper first-frame sampling for desk-scale runs."""
        base = dict(init_neg=1000, bbr_samples=300)
        base.update(kw)
        return cls(**base)

    def with_(self, **kw) -> "TrackerConfig":
        return replace(self, **kw)

    def describe(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in ("pos_proposal", "neg_proposal"):
            p = d[k]
            d[k] = f"{p.kind}:{p.trans}:{p.scale}:{p.aspect}"
        return d


@dataclass(frozen=True)
class TargetState:
    """Centre and scale relative to the first-frame target size."""

    cx: float
    cy: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ArgumentError("scale must be positive")
        object.__setattr__(self, "scale", min(max(float(self.scale), MIN_SCALE), MAX_SCALE))

    def box(self, base_size) -> np.ndarray:
        w, h = base_size
        return cxcywh_to_corners(np.array([[self.cx, self.cy, w * self.scale, h * self.scale]]))[0]

    @classmethod
    def from_box(cls, box, base_size) -> "TargetState":
        cx, cy, w, h = corners_to_cxcywh(as_box_array(box))[0]
        return cls(cx, cy, math.sqrt((w * h) / (base_size[0] * base_size[1])))


class SampleMemory:
    """Cached RoI features of collected samples, ordered by frame index."""

    def __init__(self, t_long: int, t_short: int):
        self.t_long = t_long
        self.t_short = t_short
        self.frames: list[int] = []
        self.pos: list[np.ndarray] = []
        self.neg: list[np.ndarray] = []

    def add(self, t: int, pos: np.ndarray, neg: np.ndarray) -> None:
        if self.frames and t <= self.frames[-1]:
            raise StateError(f"frame {t} added after frame {self.frames[-1]}")
        self.frames.append(t)
        self.pos.append(pos)
        self.neg.append(neg)
        self.evict(t)

    def evict(self, now: int) -> None:
        """Drop positives older than ``t_long`` and negatives older than ``t_short`` frames."""
        for i, t in enumerate(self.frames):
            if now - t >= self.t_long:
                self.pos[i] = self.pos[i][:0]
            if now - t >= self.t_short:
                self.neg[i] = self.neg[i][:0]
        keep = [i for i in range(len(self.frames)) if len(self.pos[i]) or len(self.neg[i])]
        self.frames = [self.frames[i] for i in keep]
        self.pos = [self.pos[i] for i in keep]
        self.neg = [self.neg[i] for i in keep]

    def _gather(self, parts, now, horizon):
        sel = [p for t, p in zip(self.frames, parts) if now - t < horizon and len(p)]
        return np.concatenate(sel) if sel else None

    def positives(self, now: int, horizon: int) -> np.ndarray | None:
        return self._gather(self.pos, now, horizon)

    def negatives(self, now: int, horizon: int) -> np.ndarray | None:
        return self._gather(self.neg, now, horizon)

    def __len__(self) -> int:
        return sum(len(p) + len(n) for p, n in zip(self.pos, self.neg))

    @property
    def n_pos(self) -> int:
        return sum(len(p) for p in self.pos)

    @property
    def n_neg(self) -> int:
        return sum(len(n) for n in self.neg)


@dataclass
class OnlineModel:
    params: dict
    base_size: tuple
    regressor: RegressorModel | None = None
    sgd: tc.SgdState | None = None
    losses: list = field(default_factory=list)

    def head(self) -> dict:
        return {k: self.params[k] for k in HEAD_KEYS}


@dataclass
class HardBatch:
    pos: np.ndarray
    neg: np.ndarray
    pool_scores: np.ndarray      # positive scores of the scored negative pool
    selected: np.ndarray         # indices into the pool of the kept negatives


def hard_minibatch(pos_feats, neg_feats, params, config: TrackerConfig, rng: np.random.Generator) -> HardBatch:
    """``batch_pos`` random positives and the ``batch_neg`` hardest of a scored negative pool.

    With no more stored negatives than ``batch_neg`` every one of them is
    used (padded by resampling when short). Otherwise the pool is all stored
    negatives, or ``mining_pool`` of them drawn without replacement when
    there are more, and the top ``batch_neg`` by positive score are kept.
    """
    if pos_feats is None or neg_feats is None or len(pos_feats) == 0 or len(neg_feats) == 0:
        raise StateError("sample memory holds no positives or no negatives")
    n_pos, n_neg = len(pos_feats), len(neg_feats)
    pi = rng.choice(n_pos, size=config.batch_pos, replace=n_pos < config.batch_pos)
    if n_neg <= config.batch_neg:
        extra = rng.choice(n_neg, size=config.batch_neg - n_neg, replace=True)
        pool = np.r_[np.arange(n_neg), extra]
        return HardBatch(pos_feats[pi], neg_feats[pool], np.full(len(pool), np.nan), np.arange(len(pool)))
    if n_neg <= config.mining_pool:
        pool = np.arange(n_neg)
    else:
        pool = rng.choice(n_neg, size=config.mining_pool, replace=False)
    scores = head_forward(neg_feats[pool], params)[:, 0, 0]
    order = np.argsort(-scores, kind="stable")[: config.batch_neg]
    return HardBatch(pos_feats[pi], neg_feats[pool[order]], scores, order)


def _train_head(model: OnlineModel, pos_feats, neg_feats, iters: int, lr: float, config: TrackerConfig,
                rng: np.random.Generator) -> None:
    state = tc.SgdState(lr, config.momentum, config.weight_decay)
    mult = {"fc6.W": config.fc6_lr_mult, "fc6.b": config.fc6_lr_mult}
    labels = np.r_[np.ones(config.batch_pos, dtype=np.int64), np.zeros(config.batch_neg, dtype=np.int64)]
    for _ in range(iters):
        hb = hard_minibatch(pos_feats, neg_feats, model.params, config, rng)
        x = np.concatenate([hb.pos, hb.neg])
        f, cache = head_forward(x, model.params, keep_cache=True)
        loss, g = loss_cls_grad(f, labels, 0)
        grads, _ = head_backward(g, cache, model.params)
        model.params = tc.sgd_step(model.params, grads, state, mult)
        model.losses.append(loss)


def _frame_bounds(frame) -> np.ndarray:
    return np.array([0.0, 0.0, frame.shape[1], frame.shape[0]])


def _context_window(box, frame, context: float) -> np.ndarray:
    cx, cy, w, h = corners_to_cxcywh(as_box_array(box))[0]
    win = cxcywh_to_corners(np.array([[cx, cy, w * context, h * context]]))
    return clip_boxes(win, frame.shape[1], frame.shape[0])[0]


class Tracker:
    """Single-target tracker built on a pretrained multi-domain network."""

    def __init__(self, pretrained: dict, net_config: NetworkConfig, config: TrackerConfig | None = None,
                 seed: int = 0):
        self.net_config = net_config
        self.config = config or TrackerConfig()
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.extractor = FeatureExtractor(net_config)
        self.pretrained = dict(pretrained)
        self.model: OnlineModel | None = None
        self.memory = SampleMemory(self.config.t_long, self.config.t_short)
        self.state: TargetState | None = None
        self.last_confident: TargetState | None = None
        self.t = -1
        self.long_updates: list[int] = []
        self.short_updates: list[int] = []
        self.frames_seen: list[int] = []

    # -- first frame -----------------------------------------------------
    def init_first_frame(self, frame: np.ndarray, gt) -> OnlineModel:
        cfg = self.config
        rng = self.rng
        gt = as_box_array(gt)[0]
        self._see(0)
        base = (gt[2] - gt[0], gt[3] - gt[1])
        params = dict(self.pretrained)
        width = params["fc5.W"].shape[0]
        params["fc6.W"] = new_branches(width, 1, rng)
        params["fc6.b"] = np.zeros((1, 2))
        bounds = _frame_bounds(frame)
        pos = sample_boxes(rng, gt, cfg.init_pos, iou_at_least(cfg.init_pos_iou), cfg.pos_proposal, bounds)
        neg = sample_boxes(rng, gt, cfg.init_neg, iou_below(cfg.init_neg_iou), cfg.neg_proposal, bounds)
        reg_boxes = None
        if cfg.bbr:
            reg_boxes = sample_boxes(rng, gt, cfg.bbr_samples, iou_at_least(cfg.bbr_iou),
                                     Proposal("gaussian", 0.3, 0.3), bounds)
        cover = np.concatenate([neg] + ([reg_boxes] if reg_boxes is not None else []))
        ff = self.extractor.frame_features(frame, gt, pos, params, cover=cover)
        pos_f = ff.features
        neg_f = ff.extract(neg, self.net_config)
        self.model = OnlineModel(params, base)
        _train_head(self.model, pos_f, neg_f, cfg.init_iters, cfg.lr_init, cfg, rng)
        if reg_boxes is not None:
            self.model.regressor = fit_regressor(ff.extract(reg_boxes, self.net_config), reg_boxes, gt,
                                                 cfg.bbr_lambda, cfg.bbr_iou)
        # keep a first-frame subset in memory for the online updates
        keep_p = rng.choice(len(pos_f), size=min(cfg.update_pos, len(pos_f)), replace=False)
        keep_n = rng.choice(len(neg_f), size=min(cfg.update_neg, len(neg_f)), replace=False)
        self.memory.add(0, pos_f[np.sort(keep_p)], neg_f[np.sort(keep_n)])
        self.state = TargetState.from_box(gt, base)
        self.last_confident = self.state
        self.t = 0
        return self.model

    # -- later frames ----------------------------------------------------
    def _see(self, t: int) -> None:
        if self.frames_seen and t <= self.frames_seen[-1]:
            raise StateError(f"frame {t} requested after frame {self.frames_seen[-1]}")
        self.frames_seen.append(t)

    def draw_candidates(self, state: TargetState, frame, spread: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Gaussian candidate states around ``state`` as boxes, plus a validity mask.

        Candidates keep their size and are shifted to lie inside the frame;
        those whose drawn centre falls outside the frame are marked invalid.
        """
        cfg = self.config
        w0, h0 = self.model.base_size
        fh, fw = frame.shape[:2]
        s = (w0 + h0) / 2
        z = self.rng.standard_normal((cfg.n_candidates, 3))
        cx = state.cx + cfg.trans_std * spread * s * z[:, 0]
        cy = state.cy + cfg.trans_std * spread * s * z[:, 1]
        u = np.clip(z[:, 2] * spread, -cfg.scale_clip * spread, cfg.scale_clip * spread)
        sc = np.clip(state.scale * cfg.scale_step ** u, MIN_SCALE, MAX_SCALE)
        w, h = np.minimum(w0 * sc, fw), np.minimum(h0 * sc, fh)
        valid = (cx >= 0) & (cx <= fw) & (cy >= 0) & (cy <= fh) & (w >= MIN_SIDE) & (h >= MIN_SIDE)
        cx = np.clip(cx, w / 2, fw - w / 2)
        cy = np.clip(cy, h / 2, fh - h / 2)
        return cxcywh_to_corners(np.stack([cx, cy, w, h], axis=1)), valid

    def score(self, features) -> np.ndarray:
        return positive_prob(head_forward(features, self.model.params), 0)

    def track_frame(self, frame: np.ndarray, t: int | None = None) -> tuple[TargetState, float, np.ndarray]:
        """Estimate the target in the next frame; returns (state, f+, reported box)."""
        if self.model is None:
            raise StateError("tracker is not initialised")
        cfg = self.config
        t = self.t + 1 if t is None else t
        self._see(t)
        prev = self.state
        spread = 1.0
        cand, valid = self.draw_candidates(prev, frame, spread)
        while not valid.any():
            spread *= 2.0
            if spread > 64:
                raise StateError("no candidate centre falls inside the frame")
            cand, valid = self.draw_candidates(prev, frame, spread)
        cand = cand[valid]
        prev_box = prev.box(self.model.base_size)
        context = _context_window(prev_box, frame, cfg.context)
        ff = self.extractor.frame_features(frame, prev_box, cand, self.model.params, cover=context[None])
        scores = self.score(ff.features)
        order = np.argsort(-scores, kind="stable")
        best = order[: cfg.top_k]
        raw_box = cand[best].mean(axis=0)
        f_pos = float(scores[best].mean())
        success = f_pos > cfg.success_threshold
        reported = raw_box
        if success:
            new_state = TargetState.from_box(raw_box, self.model.base_size)
            if cfg.bbr and self.model.regressor is not None:
                feat = ff.extract(raw_box[None], self.net_config)
                reported = apply_regressor(self.model.regressor, feat, raw_box[None])[0]
            self.last_confident = new_state
            self.state = new_state
            self.collect_samples(frame, t, raw_box, ff, context)
        else:
            self.state = self.last_confident
        self.t = t
        self.last_raw = raw_box
        if not success:
            self.update_model("short", t)
            self.short_updates.append(t)
        if t % cfg.long_interval == 0:
            self.update_model("long", t)
            self.long_updates.append(t)
        return self.state, f_pos, reported

    def collect_samples(self, frame, t: int, box, ff: FrameFeatures, cover=None) -> None:
        """Positives and negatives around the estimate, read off the frame's feature map.

        Samples stay inside the context window of the estimate, intersected
        with ``cover`` (the region the feature map was computed for).
        """
        cfg = self.config
        window = _context_window(box, frame, cfg.context)
        if cover is not None:
            window = np.r_[np.maximum(window[:2], cover[:2]), np.minimum(window[2:], cover[2:])]
        b = as_box_array(box)[0]
        window = np.r_[np.minimum(window[:2], b[:2]), np.maximum(window[2:], b[2:])]
        pos = sample_boxes(self.rng, box, cfg.update_pos, iou_above(cfg.update_pos_iou), cfg.pos_proposal, window)
        neg = sample_boxes(self.rng, box, cfg.update_neg, iou_below(cfg.update_neg_iou), cfg.neg_proposal, window)
        self.memory.add(t, ff.extract(pos, self.net_config), ff.extract(neg, self.net_config))
        self.last_collected = (pos, neg)

    def update_model(self, kind: str, t: int) -> None:
        cfg = self.config
        if kind not in ("long", "short"):
            raise ArgumentError(f"unknown update kind {kind!r}")
        horizon = cfg.t_long if kind == "long" else cfg.t_short
        pos = self.memory.positives(t, horizon)
        neg = self.memory.negatives(t, cfg.t_short)
        if pos is None or neg is None:
            return
        _train_head(self.model, pos, neg, cfg.update_iters, cfg.lr_update, cfg, self.rng)

    def session_tensors(self) -> dict[str, np.ndarray]:
        out = {f"online.{k}": v for k, v in self.model.head().items()}
        if self.model.regressor is not None:
            out.update(self.model.regressor.to_tensors())
        return out


@dataclass
class TrackResult:
    boxes: np.ndarray
    scores: np.ndarray
    raw_boxes: np.ndarray
    long_updates: list
    short_updates: list
    forward_passes: int


def run_sequence(seq: Sequence, pretrained: dict, net_config: NetworkConfig, config: TrackerConfig | None = None,
                 seed: int = 0, results_path=None, session_path=None) -> TrackResult:
    """Track a whole sequence from its first-frame ground truth.

    ``session_path`` receives the final online head and box regressor in
    checkpoint format.
    """
    tracker = Tracker(pretrained, net_config, config, seed)
    first = seq.frame(0)
    tracker.init_first_frame(first, seq.gt[0])
    boxes, raws, scores = [seq.gt[0]], [seq.gt[0]], [1.0]
    for t in range(1, len(seq)):
        state, f_pos, reported = tracker.track_frame(seq.frame(t), t)
        boxes.append(reported)
        raws.append(tracker.last_raw)
        scores.append(f_pos)
    result = TrackResult(np.array(boxes), np.array(scores), np.array(raws), tracker.long_updates,
                         tracker.short_updates, tracker.extractor.forward_count)
    if results_path is not None:
        Path(results_path).parent.mkdir(parents=True, exist_ok=True)
        write_results(results_path, result.boxes, result.scores)
    if session_path is not None:
        Path(session_path).parent.mkdir(parents=True, exist_ok=True)
        tc.save_checkpoint(session_path, tracker.session_tensors())
    return result


def long_update_frames(n_frames: int, interval: int = 10) -> list[int]:
    """Frames (0-based, first frame = 0) at which scheduled updates fire."""
    return [t for t in range(1, n_frames) if t % interval == 0]


__all__ = [
    "TrackerConfig", "TargetState", "SampleMemory", "OnlineModel", "HardBatch", "Tracker", "TrackResult",
    "hard_minibatch", "run_sequence", "long_update_frames", "iou_many",
]
