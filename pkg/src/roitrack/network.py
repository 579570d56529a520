"""Whole-network glue: one backbone pass per frame, RoI features for many boxes."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import backbone as bb
from .boxes import as_box_array
from .multidomain_head import init_head_params
from .roi_extract import BatchCache, PoolingMode, extract_batch, extract_batch_backward


@dataclass(frozen=True)
class NetworkConfig:
    backbone: bb.BackboneConfig = field(default_factory=bb.BackboneConfig.full)
    pooling: PoolingMode = PoolingMode.ADAPTIVE
    roi_out: tuple = (7, 7)
    sampling_ratio: int = 1
    fc_width: int = 512
    dropout: float = 0.0
    # extra crop context (input pixels per side) so boxes on the crop border
    # still have feature nodes under every sample point; None = node-0 offset.
    # The right and bottom sides get one feature stride more, since the
    # last node can fall up to a stride short of the crop edge.
    margin: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "pooling", PoolingMode(self.pooling))

    @classmethod
    def full(cls, **kw) -> "NetworkConfig":
        return cls(backbone=bb.BackboneConfig.full(**_pop_backbone(kw)), fc_width=512, **kw)

    @classmethod
    def toy(cls, **kw) -> "NetworkConfig":
        return cls(backbone=bb.BackboneConfig.toy(**_pop_backbone(kw)), fc_width=32, **kw)

    @property
    def crop_margin(self) -> float:
        return math.ceil(bb.feature_offset(self.backbone)) if self.margin is None else self.margin

    @property
    def feature_dim(self) -> int:
        oh, ow = self.roi_out
        return bb.out_channels(self.backbone) * ((oh - 3) // 2 + 1) * ((ow - 3) // 2 + 1)

    def with_(self, **kw) -> "NetworkConfig":
        bkw = _pop_backbone(kw)
        cfg = replace(self, **kw)
        if bkw:
            cfg = replace(cfg, backbone=replace(cfg.backbone, **bkw))
        return cfg

    def describe(self) -> dict:
        d = asdict(self)
        d["pooling"] = self.pooling.value
        d["backbone"]["variant"] = self.backbone.variant.value
        return d


def _pop_backbone(kw: dict) -> dict:
    keys = ("variant", "use_lrn", "dtype", "input_side", "init_gain")
    return {k: kw.pop(k) for k in keys if k in kw}


def config_hash(obj) -> str:
    """Stable short hash of a (nested) config description."""
    def flat(prefix, v, out):
        if isinstance(v, dict):
            for k in sorted(v):
                flat(f"{prefix}{k}.", v[k], out)
        else:
            out.append(f"{prefix[:-1]}={v!r}")
        return out
    desc = obj.describe() if hasattr(obj, "describe") else obj
    return hashlib.sha256("\n".join(flat("", desc, [])).encode()).hexdigest()[:16]


def init_network(config: NetworkConfig, n_domains: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = bb.init_params(config.backbone, rng)
    params.update(init_head_params(config.feature_dim, config.fc_width, n_domains, rng))
    return params


@dataclass
class FrameFeatures:
    features: np.ndarray          # (N, C, 3, 3) post-pool RoI features
    featmap: np.ndarray
    transform: bb.CropTransform
    roi_cache: BatchCache | None = None
    backbone_cache: bb.ForwardCache | None = None

    def extract(self, boxes, config: NetworkConfig) -> np.ndarray:
        """Features of further boxes (original frame coordinates) from the same map."""
        return _extract(self.featmap, self.transform, boxes, config)


def _extract(featmap, transform, boxes, config, return_cache=False):
    crop_boxes = transform.to_crop(boxes)
    return extract_batch(
        featmap, crop_boxes, config.pooling, config.roi_out,
        feature_stride=bb.feature_stride(config.backbone), offset=bb.feature_offset(config.backbone),
        sampling_ratio=config.sampling_ratio, pool=True, return_cache=return_cache,
    )


class FeatureExtractor:
    """Computes the shared feature map of a frame and reads RoI features off it.

    ``forward_count`` counts backbone passes.
    """

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.forward_count = 0

    def frame_features(self, frame: np.ndarray, target_box, boxes, params, cover=None,
                       keep_cache: bool = False) -> FrameFeatures:
        """One backbone pass over the crop enclosing ``boxes`` (and ``cover``)."""
        cfg = self.config
        boxes = as_box_array(boxes)
        enclose = boxes if cover is None else np.concatenate([boxes, as_box_array(cover)])
        crop, transform = bb.prepare_input(
            frame, target_box, enclose, cfg.backbone.input_side,
            margin=cfg.crop_margin, min_side=bb.receptive_field(cfg.backbone),
            far_margin=cfg.crop_margin + bb.feature_stride(cfg.backbone),
        )
        self.forward_count += 1
        if keep_cache:
            featmap, bcache = bb.forward_features(crop, params, cfg.backbone, keep_cache=True)
            feats, rcache = _extract(featmap, transform, boxes, cfg, return_cache=True)
            return FrameFeatures(feats, featmap, transform, rcache, bcache)
        featmap = bb.forward_features(crop, params, cfg.backbone)
        return FrameFeatures(_extract(featmap, transform, boxes, cfg), featmap, transform)

    def backward(self, d_features: np.ndarray, ff: FrameFeatures, params) -> dict[str, np.ndarray]:
        d_map = extract_batch_backward(d_features, ff.roi_cache)
        return bb.backward_features(d_map, ff.backbone_cache, params, self.config.backbone)
