"""Timing of shared-map RoI extraction against one network pass per candidate."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import backbone as bb
from ..errors import ArgumentError
from ..network import FeatureExtractor, NetworkConfig, init_network
from ..roi_extract import extract_batch
from ..sampling import Proposal, draw_proposals
from ..boxes import clip_boxes


@dataclass
class BenchReport:
    n_rois: int
    reps: int
    shared_seconds: float        # median wall-clock time of the shared-map path
    per_candidate_seconds: float  # median wall-clock time of the per-candidate path
    speedup: float
    feature_shape: tuple

    def as_dict(self) -> dict:
        return {
            "n_rois": self.n_rois,
            "reps": self.reps,
            "shared_seconds": self.shared_seconds,
            "per_candidate_seconds": self.per_candidate_seconds,
            "speedup": self.speedup,
            "feature_shape": list(self.feature_shape),
        }

    def format(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.as_dict().items())


def _scene(rng: np.random.Generator, side: int = 160):
    frame = rng.random((side, side, 3))
    target = np.array([side / 2 - 20, side / 2 - 20, side / 2 + 20, side / 2 + 20])
    return frame, target


def per_candidate_features(frame, boxes, params, config: NetworkConfig) -> np.ndarray:
    """Warp every box to the network input size and run the backbone on each crop."""
    side = config.backbone.input_side
    stride = bb.feature_stride(config.backbone)
    offset = bb.feature_offset(config.backbone)
    out = []
    for box in boxes:
        crop, tr = bb.prepare_input(frame, box, box[None], side)
        fmap = bb.forward_features(crop, params, config.backbone)
        out.append(extract_batch(fmap, tr.to_crop(box[None]), config.pooling, config.roi_out,
                                 stride, offset, config.sampling_ratio)[0])
    return np.stack(out)


def shared_features(frame, target, boxes, params, config: NetworkConfig) -> np.ndarray:
    return FeatureExtractor(config).frame_features(frame, target, boxes, params).features


def benchmark_extraction(config: NetworkConfig | None = None, n_rois: int = 256, reps: int = 10,
                         warmup: int = 1, seed: int = 0) -> BenchReport:
    """Median times of both feature paths for ``n_rois`` candidate boxes."""
    if n_rois < 1:
        raise ArgumentError("n_rois must be >= 1")
    if reps < 1:
        raise ArgumentError("reps must be >= 1")
    config = config or NetworkConfig.full()
    rng = np.random.default_rng(seed)
    params = init_network(config, 1, rng)
    frame, target = _scene(rng)
    boxes = draw_proposals(rng, target, n_rois, Proposal("gaussian", 0.3, 0.1), np.array([0, 0, 160, 160]))
    boxes = clip_boxes(boxes, frame.shape[1], frame.shape[0])

    def timed(fn):
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            res = fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times)), res

    t_shared, a = timed(lambda: shared_features(frame, target, boxes, params, config))
    t_each, b = timed(lambda: per_candidate_features(frame, boxes, params, config))
    if a.shape != b.shape:
        raise AssertionError(f"feature shapes differ: {a.shape} vs {b.shape}")
    return BenchReport(n_rois, reps, t_shared, t_each, t_each / t_shared, a.shape)
