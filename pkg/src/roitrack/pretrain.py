"""Offline multi-domain training of the backbone and the branch head.

Iteration ``k`` (counting from 1) trains on domain ``k mod D``. Each
minibatch draws a few frames of that domain, samples positives and
negatives around the ground truth of each frame, and reads all of a
frame's RoI features off one shared feature map.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .boxes import as_box_array, iou  # noqa: F401  (iou re-exported for callers)
from .errors import ArgumentError, ConfigError, NumericError
from .multidomain_head import POS, head_backward, head_forward, loss_cls_grad, loss_inst_grad, n_domains
from .network import FeatureExtractor, FrameFeatures, NetworkConfig, init_network
from .sampling import NEGATIVE, POSITIVE, Proposal, iou_at_least, iou_below, sample_boxes
from .sequences import Sequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    frames_per_iter: int = 8
    pos_per_frame: int = 32
    neg_per_frame: int = 96
    pos_iou: float = 0.7
    neg_iou: float = 0.5
    accumulate_every: int = 50
    inst_domains: int = 100
    alpha: float = 0.1
    epochs: int = 1000
    iterations: int | None = None     # overrides epochs * D when set
    lr: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    train_conv: bool = True
    checkpoint_every: int = 0         # flushes between checkpoints; 0 = final only
    pos_proposal: Proposal = POSITIVE
    neg_proposal: Proposal = NEGATIVE

    def __post_init__(self):
        for name in ("frames_per_iter", "pos_per_frame", "neg_per_frame", "accumulate_every", "inst_domains", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if not (0 <= self.neg_iou <= 1 and 0 <= self.pos_iou <= 1):
            raise ConfigError("IoU thresholds must lie in [0, 1]")
        if self.pos_iou <= self.neg_iou:
            raise ConfigError("pos_iou must exceed neg_iou")
        if self.alpha < 0 or self.lr < 0:
            raise ConfigError("alpha and lr must be >= 0")

    @classmethod
    def toy(cls, **kw) -> "PretrainConfig":
        """Desk-scale schedule: frozen random convolutions, one step per minibatch."""
        base = dict(frames_per_iter=4, accumulate_every=1, iterations=100, lr=0.01, train_conv=False)
        base.update(kw)
        return cls(**base)

    def n_iterations(self, n_dom: int) -> int:
        return self.iterations if self.iterations is not None else self.epochs * n_dom

    def with_(self, **kw) -> "PretrainConfig":
        return replace(self, **kw)

    def describe(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in ("pos_proposal", "neg_proposal"):
            p = d[k]
            d[k] = f"{p.kind}:{p.trans}:{p.scale}:{p.aspect}"
        return d


class DomainDataset:
    """One sequence per domain; every frame carries one valid ground-truth box."""

    def __init__(self, domains: list[Sequence]):
        if not domains:
            raise ArgumentError("dataset needs at least one domain")
        for seq in domains:
            if len(seq) < 1:
                raise ArgumentError(f"domain {seq.name} has no frames")
        self.domains = list(domains)

    def __len__(self) -> int:
        return len(self.domains)


def domain_schedule(k: int, n_dom: int) -> int:
    """Active domain of iteration ``k`` (1-based): ``k mod D``."""
    return k % n_dom


@dataclass
class Minibatch:
    domain: int
    features: np.ndarray          # (N, C, 3, 3)
    labels: np.ndarray            # 1 positive, 0 negative
    frame_ids: np.ndarray
    boxes: np.ndarray
    domains: np.ndarray           # per-sample domain tag (all equal)
    frame_features: list = field(default_factory=list)   # per frame, kept for backprop
    frame_counts: list = field(default_factory=list)


class FeatureMapCache:
    """Feature maps of whole frames, reused while the backbone is frozen."""

    def __init__(self):
        self.maps: dict = {}

    def get(self, key, compute):
        if key not in self.maps:
            self.maps[key] = compute()
        return self.maps[key]


def _frame_bounds(frame: np.ndarray) -> np.ndarray:
    return np.array([0.0, 0.0, frame.shape[1], frame.shape[0]])


def build_minibatch(dataset: DomainDataset, domain: int, config: PretrainConfig, params,
                    extractor: FeatureExtractor, rng: np.random.Generator,
                    map_cache: FeatureMapCache | None = None, keep_cache: bool = False) -> Minibatch:
    """Sample frames of one domain and extract all their RoI features.

    Frames are drawn without replacement, or with replacement when the
    domain has fewer than ``frames_per_iter`` frames. With ``map_cache`` the
    feature map of a frame covers the whole frame and is computed once.
    """
    seq = dataset.domains[domain]
    n_frames = len(seq)
    replace_ = n_frames < config.frames_per_iter
    chosen = np.sort(rng.choice(n_frames, size=config.frames_per_iter, replace=replace_))
    feats, labels, fids, boxes, ffs, counts = [], [], [], [], [], []
    for t in chosen:
        t = int(t)
        frame = seq.frame(t)
        gt = seq.gt[t]
        bounds = _frame_bounds(frame)
        pos = sample_boxes(rng, gt, config.pos_per_frame, iou_at_least(config.pos_iou), config.pos_proposal, bounds)
        neg = sample_boxes(rng, gt, config.neg_per_frame, iou_below(config.neg_iou), config.neg_proposal, bounds)
        b = np.concatenate([pos, neg])
        if map_cache is not None:
            whole = map_cache.get((domain, t), lambda: extractor.frame_features(frame, gt, bounds[None], params))
            f = whole.extract(b, extractor.config)
            ff = None
        else:
            ff = extractor.frame_features(frame, gt, b, params, keep_cache=keep_cache)
            f = ff.features
        feats.append(f)
        labels.append(np.r_[np.ones(len(pos), dtype=np.int64), np.zeros(len(neg), dtype=np.int64)])
        fids.append(np.full(len(b), t))
        boxes.append(b)
        ffs.append(ff)
        counts.append(len(b))
    n = sum(counts)
    return Minibatch(domain, np.concatenate(feats), np.concatenate(labels), np.concatenate(fids),
                     np.concatenate(boxes), np.full(n, domain), ffs, counts)


def instance_subset(domain: int, n_dom: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """The active domain plus ``min(size, D) - 1`` others drawn without replacement."""
    size = min(size, n_dom)
    others = np.array([d for d in range(n_dom) if d != domain], dtype=np.int64)
    picked = rng.choice(others, size=size - 1, replace=False) if size > 1 else np.empty(0, dtype=np.int64)
    return np.sort(np.r_[domain, picked]).astype(np.int64)


def minibatch_loss(mb: Minibatch, params, config: PretrainConfig, net_config: NetworkConfig,
                   rng: np.random.Generator):
    """Forward the head; returns (total, cls, inst, grads of head params, d features)."""
    f, cache = head_forward(mb.features, params, net_config.dropout, rng, keep_cache=True)
    l_cls, g = loss_cls_grad(f, mb.labels, mb.domain)
    l_inst = 0.0
    if config.alpha > 0:
        subset = instance_subset(mb.domain, f.shape[2], config.inst_domains, rng)
        l_inst, g_inst = loss_inst_grad(f, mb.labels, mb.domain, subset)
        g = g + config.alpha * g_inst
    total = l_cls + config.alpha * l_inst
    grads, d_feat = head_backward(g, cache, params)
    return total, l_cls, l_inst, grads, d_feat


@dataclass
class PretrainResult:
    params: dict
    losses: np.ndarray               # (K, 3): total, cls, inst per iteration
    domains: list
    checkpoints: list
    flushes: int


def _save(directory: Path | None, name: str, params) -> Path | None:
    if directory is None:
        return None
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    tc.save_checkpoint(path, params)
    return path


def pretrain_loop(dataset: DomainDataset, config: PretrainConfig, net_config: NetworkConfig, seed: int,
                  params: dict | None = None, checkpoint_dir=None, progress=None) -> PretrainResult:
    """Multi-domain SGD with gradient accumulation; deterministic given ``seed``.

    A non-finite loss stops training after writing ``diagnostic.ckpt`` (when
    a checkpoint directory is given) and raises :class:`NumericError`.
    """
    n_dom = len(dataset)
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_network(net_config, n_dom, rng)
    elif n_domains(params) != n_dom:
        raise ArgumentError(f"parameters have {n_domains(params)} branches for {n_dom} domains")
    params = dict(params)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    extractor = FeatureExtractor(net_config)
    map_cache = None if config.train_conv else FeatureMapCache()
    acc = tc.GradientAccumulator(tc.SgdState(config.lr, config.momentum, config.weight_decay), config.accumulate_every)
    losses, visited, saved = [], [], []
    for k in range(1, config.n_iterations(n_dom) + 1):
        d = domain_schedule(k, n_dom)
        visited.append(d)
        mb = build_minibatch(dataset, d, config, params, extractor, rng, map_cache, keep_cache=config.train_conv)
        total, l_cls, l_inst, grads, d_feat = minibatch_loss(mb, params, config, net_config, rng)
        if not np.isfinite(total):
            diag = dict(params)
            diag["diagnostic.iteration"] = np.array([float(k)])
            _save(ckdir, "diagnostic.ckpt", diag)
            raise NumericError(f"non-finite loss at iteration {k} (domain {d})")
        if config.train_conv:
            start = 0
            for ff, cnt in zip(mb.frame_features, mb.frame_counts):
                g_conv = extractor.backward(d_feat[start:start + cnt], ff, params)
                grads = tc.accumulate_gradients(grads, g_conv)
                start += cnt
        losses.append((total, l_cls, l_inst))
        params, flushed = acc.step(params, grads)
        if flushed and config.checkpoint_every and acc.flushes % config.checkpoint_every == 0:
            saved.append(_save(ckdir, f"flush_{acc.flushes:06d}.ckpt", params))
        if progress is not None:
            progress(k, total)
        log.debug("iter %d domain %d loss %.6f", k, d, total)
    if acc.buffer is not None:
        params = acc.flush(params)
    final = _save(ckdir, "final.ckpt", params)
    if final is not None:
        saved.append(final)
    return PretrainResult(params, np.array(losses), visited, saved, acc.flushes)


def held_in_separation(dataset: DomainDataset, params, net_config: NetworkConfig, seed: int,
                       n_pos: int = 32, frames: int = 4, pos_iou: float = 0.7) -> float:
    """Fraction of held-in positives whose own branch gives the highest positive score."""
    rng = np.random.default_rng(seed)
    extractor = FeatureExtractor(net_config)
    hits = total = 0
    for d, seq in enumerate(dataset.domains):
        for t in np.sort(rng.choice(len(seq), size=min(frames, len(seq)), replace=False)):
            frame = seq.frame(int(t))
            gt = seq.gt[int(t)]
            pos = sample_boxes(rng, gt, n_pos, iou_at_least(pos_iou), POSITIVE, _frame_bounds(frame))
            ff: FrameFeatures = extractor.frame_features(frame, gt, _frame_bounds(frame)[None], params)
            f = head_forward(ff.extract(pos, net_config), params)
            s = f[:, POS, :]
            others = np.delete(s, d, axis=1)
            own = s[:, d]
            hits += int(np.sum(own > others.max(axis=1))) if others.shape[1] else len(own)
            total += len(own)
    return hits / total


def load_pretrained(path) -> dict:
    return tc.load_checkpoint(path)


def as_dataset(sequences) -> DomainDataset:
    return sequences if isinstance(sequences, DomainDataset) else DomainDataset(list(sequences))


__all__ = [
    "PretrainConfig", "DomainDataset", "Minibatch", "PretrainResult", "FeatureMapCache",
    "domain_schedule", "build_minibatch", "instance_subset", "minibatch_loss", "pretrain_loop",
    "held_in_separation", "load_pretrained", "as_dataset", "iou", "sample_boxes", "as_box_array",
]
