"""conv1-3 feature extractor in two topologies, and input preparation.

``original``: conv1 7x7/2 - pool 3x3/2 - conv2 5x5/2 (pad 1) - pool 3x3/2 - conv3 3x3/1.
``dense``:    same, without the pool after conv2 and with conv3 dilated by 3.

Both have a 75 pixel receptive field; the dense variant halves the feature
stride (8 instead of 16). With conv2 padded by one, a 107x107 input gives a
3x3 map for ``original`` and 6x6 for ``dense``. In general the dense extent is
``2*n`` or ``2*n - 1`` where ``n`` is the original extent.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .boxes import as_box_array
from .errors import DimensionError
from . import tensor_core as tc


class Variant(str, enum.Enum):
    ORIGINAL = "original"
    DENSE = "dense"


class LayerSpec(NamedTuple):
    name: str
    kind: str  # "conv" or "pool"
    kernel: int
    stride: int
    dilation: int = 1
    pad: int = 0


@dataclass(frozen=True)
class BackboneConfig:
    variant: Variant = Variant.DENSE
    channels: tuple = (96, 256, 512)
    in_channels: int = 3
    conv1: tuple = (7, 2, 0)  # kernel, stride, pad
    pool1: tuple = (3, 2)
    conv2: tuple = (5, 2, 1)
    pool2: tuple = (3, 2)
    conv3: tuple = (3, 1, 0)
    dense_dilation: int = 3
    input_side: int = 107
    use_lrn: bool = False
    dtype: str = "float64"
    init_gain: float = 0.3    # multiplies the fan-in bound of every conv layer

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @classmethod
    def full(cls, variant=Variant.DENSE, **kw) -> "BackboneConfig":
        return cls(variant=variant, channels=(96, 256, 512), **kw)

    @classmethod
    def toy(cls, variant=Variant.DENSE, **kw) -> "BackboneConfig":
        return cls(variant=variant, channels=(8, 16, 32), **kw)

    def with_variant(self, variant) -> "BackboneConfig":
        return replace(self, variant=Variant(variant))


def layer_plan(config: BackboneConfig) -> list[LayerSpec]:
    k1, s1, p1 = config.conv1
    k2, s2, p2 = config.conv2
    k3, s3, p3 = config.conv3
    plan = [
        LayerSpec("conv1", "conv", k1, s1, 1, p1),
        LayerSpec("pool1", "pool", config.pool1[0], config.pool1[1]),
        LayerSpec("conv2", "conv", k2, s2, 1, p2),
    ]
    if config.variant is Variant.ORIGINAL:
        plan.append(LayerSpec("pool2", "pool", config.pool2[0], config.pool2[1]))
        plan.append(LayerSpec("conv3", "conv", k3, s3, 1, p3))
    else:
        plan.append(LayerSpec("conv3", "conv", k3, s3, config.dense_dilation, p3))
    return plan


def receptive_field(config: BackboneConfig) -> int:
    rf, jump = 1, 1
    for layer in layer_plan(config):
        eff = layer.kernel + (layer.kernel - 1) * (layer.dilation - 1)
        rf += (eff - 1) * jump
        jump *= layer.stride
    return rf


def feature_stride(config: BackboneConfig) -> int:
    return int(np.prod([layer.stride for layer in layer_plan(config)]))


def feature_offset(config: BackboneConfig) -> float:
    """Input-pixel coordinate of the receptive-field centre of feature node 0."""
    centre, jump = 0.5, 1
    for layer in layer_plan(config):
        eff = layer.kernel + (layer.kernel - 1) * (layer.dilation - 1)
        centre += jump * ((eff - 1) / 2 - layer.pad)
        jump *= layer.stride
    return centre


def output_extent(config: BackboneConfig, side: int) -> int:
    n = side
    for layer in layer_plan(config):
        n = tc.conv_output_extent(n, layer.kernel, layer.stride, layer.dilation, layer.pad)
    return n


def out_channels(config: BackboneConfig) -> int:
    return config.channels[-1]


def init_params(config: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform fan-in initialisation, ``U(-g*sqrt(6/fan_in), g*sqrt(6/fan_in))`` with ``g = init_gain``."""
    params = {}
    c_in = config.in_channels
    convs = [layer for layer in layer_plan(config) if layer.kind == "conv"]
    for layer, c_out in zip(convs, config.channels):
        fan_in = c_in * layer.kernel * layer.kernel
        bound = config.init_gain * math.sqrt(6.0 / fan_in)
        params[f"{layer.name}.W"] = rng.uniform(-bound, bound, size=(c_out, c_in, layer.kernel, layer.kernel))
        params[f"{layer.name}.b"] = np.zeros(c_out)
        c_in = c_out
    return params


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)  # (layer, input, extra) per layer


def forward_features(crop: np.ndarray, params: dict[str, np.ndarray], config: BackboneConfig,
                     keep_cache: bool = False):
    """Run conv1-3 (each followed by ReLU) on a ``(3, H, W)`` network input."""
    if crop.ndim != 3 or crop.shape[0] != config.in_channels:
        raise DimensionError(f"expected ({config.in_channels}, H, W) input, got {crop.shape}")
    rf = receptive_field(config)
    if min(crop.shape[1:]) < rf:
        raise DimensionError(f"input {crop.shape[1:]} is smaller than the {rf}px receptive field")
    dtype = np.dtype(config.dtype)
    x = crop.astype(dtype, copy=False)
    cache = ForwardCache() if keep_cache else None
    for layer in layer_plan(config):
        if layer.kind == "pool":
            if cache is None:
                x = tc.maxpool2d(x, layer.kernel, layer.stride, return_indices=False)
                continue
            y, arg = tc.maxpool2d(x, layer.kernel, layer.stride)
            cache.inputs.append((layer, x, arg))
            x = y
            continue
        w = params[f"{layer.name}.W"].astype(dtype, copy=False)
        b = params[f"{layer.name}.b"].astype(dtype, copy=False)
        pre = tc.conv2d(x, w, b, layer.stride, layer.dilation, layer.pad)
        act = tc.relu(pre)
        lrn_in = None
        if config.use_lrn and layer.name in ("conv1", "conv2"):
            lrn_in = act
            act = tc.lrn(act)
        if cache is not None:
            cache.inputs.append((layer, x, (pre, lrn_in)))
        x = act
    return (x, cache) if keep_cache else x


def backward_features(grad: np.ndarray, cache: ForwardCache, params: dict[str, np.ndarray],
                      config: BackboneConfig) -> dict[str, np.ndarray]:
    """Parameter gradients of :func:`forward_features` given d(output)."""
    grads = {}
    g = grad
    for layer, x, extra in reversed(cache.inputs):
        if layer.kind == "pool":
            g = tc.maxpool2d_backward(g, extra, x.shape)
            continue
        pre, lrn_in = extra
        if lrn_in is not None:
            g = tc.lrn_backward(g, lrn_in)
        g = tc.relu_backward(g, pre)
        lg = tc.conv2d_backward(g, x, params[f"{layer.name}.W"], layer.stride, layer.dilation, layer.pad)
        grads[f"{layer.name}.W"], grads[f"{layer.name}.b"] = lg.d_params
        g = lg.d_input
    return grads


@dataclass(frozen=True)
class CropTransform:
    """``crop = scale * original - (x0, y0)`` for both axes."""

    scale: float
    x0: float
    y0: float

    def to_crop(self, boxes) -> np.ndarray:
        b = as_box_array(boxes)
        return b * self.scale - np.array([self.x0, self.y0, self.x0, self.y0])

    def to_original(self, boxes) -> np.ndarray:
        b = as_box_array(boxes)
        return (b + np.array([self.x0, self.y0, self.x0, self.y0])) / self.scale


def normalize_frame(frame: np.ndarray) -> np.ndarray:
    """HxWx3 image in [0, 1] -> 8-bit pixel values minus the mid-grey 128."""
    return np.asarray(frame, dtype=np.float64) * 255.0 - 128.0


def _linear_taps(coords: np.ndarray, size: int):
    """Neighbour indices into a 1-padded axis and their linear weights.

    Samples outside the image blend towards the zero padding.
    """
    i0 = np.floor(coords)
    f = coords - i0
    i0 = i0.astype(np.int64) + 1
    lo = np.clip(i0, 0, size + 1)
    hi = np.clip(i0 + 1, 0, size + 1)
    w_lo = np.where(i0 == lo, 1.0 - f, 0.0)
    w_hi = np.where(i0 + 1 == hi, f, 0.0)
    return lo, hi, w_lo, w_hi


def prepare_input(frame: np.ndarray, target_box, sample_boxes, input_side: int = 107,
                  margin: float = 0.0, min_side: int = 0,
                  far_margin: float | None = None) -> tuple[np.ndarray, CropTransform]:
    """Rescale so the target is ``input_side`` pixels and crop around the samples.

    The scale is ``input_side / sqrt(w*h)`` of the target. The crop is the
    integer rectangle enclosing every scaled sample box, grown by ``margin``
    pixels on the left and top and by ``far_margin`` (default ``margin``) on
    the right and bottom, and up to ``min_side``. Regions beyond the frame
    read as 0 in the returned zero-centred ``(3, H, W)`` array.
    """
    far_margin = margin if far_margin is None else far_margin
    t = as_box_array(target_box)[0]
    s = input_side / math.sqrt((t[2] - t[0]) * (t[3] - t[1]))
    b = as_box_array(sample_boxes) * s
    x0 = math.floor(b[:, 0].min() - margin)
    y0 = math.floor(b[:, 1].min() - margin)
    x1 = math.ceil(b[:, 2].max() + far_margin)
    y1 = math.ceil(b[:, 3].max() + far_margin)
    if x1 - x0 < min_side:
        extra = min_side - (x1 - x0)
        x0 -= extra // 2
        x1 = x0 + min_side
    if y1 - y0 < min_side:
        extra = min_side - (y1 - y0)
        y0 -= extra // 2
        y1 = y0 + min_side
    transform = CropTransform(s, float(x0), float(y0))
    img = normalize_frame(frame)
    # crop pixel centre o + 0.5 maps to source pixel index (o + 0.5 + x0) / s - 0.5
    ry = _linear_taps((np.arange(y1 - y0) + 0.5 + y0) / s - 0.5, img.shape[0])
    rx = _linear_taps((np.arange(x1 - x0) + 0.5 + x0) / s - 0.5, img.shape[1])
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)))
    rows = padded[ry[0]] * ry[2][:, None, None] + padded[ry[1]] * ry[3][:, None, None]
    crop = rows[:, rx[0]] * rx[2][None, :, None] + rows[:, rx[1]] * rx[3][None, :, None]
    crop = np.ascontiguousarray(crop.transpose(2, 0, 1))
    return crop, transform
