"""Fixed-size RoI features from a shared feature map.

Three extractors are provided: classical quantised RoI max pooling, RoIAlign
with a tent (triangular) interpolation kernel, and the adaptive variant whose
kernel half-width grows with the ratio of RoI size to output size.

Feature-map coordinates: node ``(v, u)`` of a ``(C, H, W)`` map sits at the
continuous point ``(u, v)``. Image boxes are mapped there by
:func:`project_box`.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import Box, as_box_array
from .errors import ArgumentError, DegenerateBoxError, DimensionError, OutOfBoundsError
from .tensor_core import maxpool2d, maxpool2d_backward

DEGENERATE_EXTENT = 1e-6


class PoolingMode(str, enum.Enum):
    ROI_POOL = "roipool"
    ROI_ALIGN = "roialign"
    ADAPTIVE = "adaptive"


@dataclass
class RoiFeature:
    values: np.ndarray
    source_box: Box
    extraction_mode: PoolingMode


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return tuple(v)
    return (v, v)


def project_box(box, feature_stride: float, offset: float = 0.0):
    """Map image-pixel boxes into feature-map coordinates, without rounding.

    ``offset`` is the image coordinate of feature node 0; the default of 0
    reduces to plain division by the stride.
    """
    if feature_stride <= 0:
        raise ArgumentError("feature stride must be positive")
    if isinstance(box, Box):
        a = (box.as_array() - offset) / feature_stride
        return Box(*a)
    return (as_box_array(box) - offset) / feature_stride


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def adaptive_bandwidth(width: float, height: float, out=(7, 7)) -> tuple[int, int]:
    """Per-axis kernel half-width ``max(1, round(size / out_size))``.

    Rounding is half-up, so a ratio of exactly 1.5 gives 2.
    """
    oh, ow = _pair(out)
    bx = max(1, int(round_half_up(width / ow)))
    by = max(1, int(round_half_up(height / oh)))
    return bx, by


def _check_featmap(featmap):
    if featmap.ndim != 3:
        raise DimensionError(f"feature map must be (C,H,W), got {featmap.shape}")


def _check_extent(boxes: np.ndarray):
    ext = np.minimum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])
    bad = np.nonzero(ext < DEGENERATE_EXTENT)[0]
    if bad.size:
        raise DegenerateBoxError(f"box {int(bad[0])}: projected extent {ext[bad[0]]:.3g} is degenerate")


def tent_weights(starts: np.ndarray, ends: np.ndarray, n_out: int, bandwidth, size: int,
                 sampling_ratio: int = 1) -> np.ndarray:
    """Row-normalised interpolation weights, shape ``(N, n_out, size)``.

    Output cell ``j`` of box ``k`` reads the feature grid at the centres of
    ``sampling_ratio`` equal sub-bins. A sample at ``p`` gives node ``u`` the
    weight ``max(0, 1 - |p - u| / b)``; weights are renormalised over
    in-map nodes, and sub-samples are averaged. A sample with no in-map node
    contributes zero.
    """
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), starts.shape)
    step = (ends - starts) / n_out
    frac = (np.arange(n_out)[:, None] + (np.arange(sampling_ratio)[None, :] + 0.5) / sampling_ratio)
    pts = starts[:, None, None] + frac[None] * step[:, None, None]  # (N, n_out, s)
    nodes = np.arange(size, dtype=np.float64)
    w = np.maximum(0.0, 1.0 - np.abs(pts[..., None] - nodes) / bw[:, None, None, None])
    total = w.sum(axis=-1, keepdims=True)
    w = np.divide(w, total, out=np.zeros_like(w), where=total > 0)
    return w.mean(axis=2)


def _supports(w: np.ndarray) -> np.ndarray:
    """``(N, 2)`` half-open node ranges holding the non-zero weights of each box."""
    nz = w.any(axis=1)
    lo = nz.argmax(axis=1)
    hi = nz.shape[1] - nz[:, ::-1].argmax(axis=1)
    empty = ~nz.any(axis=1)
    lo[empty] = hi[empty] = 0
    return np.stack([lo, hi], axis=1)


def _apply_separable(featmap: np.ndarray, wy: np.ndarray, wx: np.ndarray, sy, sx) -> np.ndarray:
    # (oh, H) x (C, H, W) x (W, ow) -> (C, oh, ow), restricted to the node
    # ranges sy, sx that carry non-zero weight
    (y0, y1), (x0, x1) = sy, sx
    if y1 <= y0 or x1 <= x0:
        return np.zeros((featmap.shape[0], wy.shape[0], wx.shape[0]))
    return np.matmul(np.matmul(wy[:, y0:y1], featmap[:, y0:y1, x0:x1]), wx[:, x0:x1].T)


def _align_weights(featmap, boxes, out, bandwidths, sampling_ratio):
    oh, ow = out
    _, h, w = featmap.shape
    bw = np.asarray(bandwidths, dtype=np.float64).reshape(-1, 2)
    if np.any(bw < 1):
        raise ArgumentError("bandwidth must be >= 1")
    wx = tent_weights(boxes[:, 0], boxes[:, 2], ow, bw[:, 0], w, sampling_ratio)
    wy = tent_weights(boxes[:, 1], boxes[:, 3], oh, bw[:, 1], h, sampling_ratio)
    return wy, wx


def roi_align(featmap: np.ndarray, box, out=(7, 7), bandwidth=1, sampling_ratio: int = 1) -> RoiFeature:
    """Tent-kernel RoIAlign of one box given in feature-map coordinates.

    ``bandwidth`` is the kernel half-width in feature cells, either a scalar
    or an ``(x, y)`` pair; 1 is ordinary bilinear interpolation.
    """
    _check_featmap(featmap)
    b = as_box_array(box)
    _check_extent(b)
    bx, by = _pair(bandwidth)
    wy, wx = _align_weights(featmap, b, _pair(out), [(bx, by)], sampling_ratio)
    vals = _apply_separable(featmap, wy[0], wx[0], _supports(wy)[0], _supports(wx)[0])
    mode = PoolingMode.ROI_ALIGN
    return RoiFeature(vals, Box.from_array(b[0]), mode)


def adaptive_roi_align(featmap: np.ndarray, box, out=(7, 7), sampling_ratio: int = 1) -> RoiFeature:
    b = as_box_array(box)
    _check_extent(b)
    bw = adaptive_bandwidth(b[0, 2] - b[0, 0], b[0, 3] - b[0, 1], out)
    feat = roi_align(featmap, b, out, bw, sampling_ratio)
    feat.extraction_mode = PoolingMode.ADAPTIVE
    return feat


def _pool_bins(starts, ends, n_out: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Half-open node ranges ``[lo, hi)`` of every bin, each ``(N, n_out)``."""
    s = round_half_up(starts).astype(np.int64)[:, None]
    e = round_half_up(ends).astype(np.int64)[:, None]
    extent = np.maximum(e - s + 1, 1)
    j = np.arange(n_out)[None, :]
    lo = np.clip((j * extent) // n_out + s, 0, size)
    hi = np.clip(-((-(j + 1) * extent) // n_out) + s, 0, size)
    return lo, hi


def _range_max_tables(featmap: np.ndarray, levels_y: int, levels_x: int):
    """Sparse tables of window maxima and their flat argmax.

    ``vals[a, b, :, y, x]`` is the maximum over rows ``y .. y + 2**a - 1``
    and columns ``x .. x + 2**b - 1`` (``-inf`` where the window leaves
    the map); ``idx`` holds the flat node index of that maximum, earlier
    rows and columns winning ties.
    """
    c, h, w = featmap.shape
    vals = np.full((levels_y, levels_x, c, h, w), -np.inf)
    idx = np.full((levels_y, levels_x, c, h, w), -1, dtype=np.int64)
    vals[0, 0] = featmap
    idx[0, 0] = np.broadcast_to(np.arange(h * w).reshape(h, w), (c, h, w))
    for a in range(levels_y):
        for b in range(levels_x):
            if a == 0 and b == 0:
                continue
            if b > 0:
                src_v, src_i, half, ax = vals[a, b - 1], idx[a, b - 1], 1 << (b - 1), 2
            else:
                src_v, src_i, half, ax = vals[a - 1, b], idx[a - 1, b], 1 << (a - 1), 1
            n = (w if ax == 2 else h) - half
            if n <= 0:
                continue
            sl = [slice(None)] * 3
            sh = [slice(None)] * 3
            sl[ax] = slice(0, n)
            sh[ax] = slice(half, half + n)
            v0, v1 = src_v[tuple(sl)], src_v[tuple(sh)]
            take_second = v1 > v0
            vals[a, b][tuple(sl)] = np.where(take_second, v1, v0)
            idx[a, b][tuple(sl)] = np.where(take_second, src_i[tuple(sh)], src_i[tuple(sl)])
    return vals, idx


def _floor_log2(n: np.ndarray) -> np.ndarray:
    return np.floor(np.log2(np.maximum(n, 1))).astype(np.int64)


def _roi_pool_batch(featmap, boxes, out, with_argmax: bool = True):
    """Quantised max pooling of ``(N, 4)`` boxes; returns values and flat argmax.

    Each bin maximum is the larger of four overlapping power-of-two windows
    looked up in a sparse table.
    """
    oh, ow = out
    c, h, w = featmap.shape
    x1, y1, x2, y2 = boxes.T
    outside = (round_half_up(x1) > w - 1) | (round_half_up(x2) < 0) | (round_half_up(y1) > h - 1) | (round_half_up(y2) < 0)
    if outside.any():
        k = int(np.flatnonzero(outside)[0])
        raise OutOfBoundsError(f"box {k} {tuple(boxes[k])} lies outside the {h}x{w} feature map")
    ylo, yhi = _pool_bins(y1, y2, oh, h)
    xlo, xhi = _pool_bins(x1, x2, ow, w)
    ly = _floor_log2(yhi - ylo)
    lx = _floor_log2(xhi - xlo)
    tv, ti = _range_max_tables(featmap, int(ly.max()) + 1, int(lx.max()) + 1)
    n = boxes.shape[0]
    # broadcast to (N, oh, ow)
    a = ly[:, :, None]
    b = lx[:, None, :]
    y0, y1_ = ylo[:, :, None], yhi[:, :, None] - (1 << a)
    x0, x1_ = xlo[:, None, :], xhi[:, None, :] - (1 << b)
    empty = (yhi <= ylo)[:, :, None] | (xhi <= xlo)[:, None, :]
    y1_ = np.maximum(y1_, y0)
    x1_ = np.maximum(x1_, x0)
    # flat offsets into the tables: level pair and channel, then node
    levels_x = tv.shape[1]
    base = ((a * levels_x + b) * c)[:, None] + np.arange(c)[None, :, None, None]
    base = base * (h * w)
    tv, ti = tv.reshape(-1), ti.reshape(-1)
    best_v = best_i = None
    for yy, xx in ((y0, x0), (y0, x1_), (y1_, x0), (y1_, x1_)):
        lin = base + (np.minimum(yy, h - 1) * w + np.minimum(xx, w - 1))[:, None]
        v = tv.take(lin)
        if not with_argmax:
            best_v = v if best_v is None else np.maximum(best_v, v)
            continue
        i = ti.take(lin)
        if best_v is None:
            best_v, best_i = v, i
        else:
            better = (v > best_v) | ((v == best_v) & (i < best_i))
            best_v = np.where(better, v, best_v)
            best_i = np.where(better, i, best_i)
    e = np.broadcast_to(empty[:, None], best_v.shape)
    best_v = np.where(e, 0.0, best_v).reshape(n, c, oh, ow)
    if not with_argmax:
        return best_v, None
    return best_v, np.where(e, -1, best_i).reshape(n, c, oh, ow)


def roi_pool(featmap: np.ndarray, box, out=(7, 7)) -> RoiFeature:
    """Quantised RoI max pooling (Fast R-CNN scheme).

    Box corners are rounded half-up to nodes ``s..e`` (inclusive); bin ``j``
    along an axis covers ``[s + floor(j*L/n), s + ceil((j+1)*L/n))`` with
    ``L = max(e - s + 1, 1)``, clipped to the map. Empty bins yield 0.
    """
    _check_featmap(featmap)
    b = as_box_array(box)[0]
    vals = _roi_pool_batch(featmap, b[None], _pair(out), with_argmax=False)[0][0]
    return RoiFeature(vals, Box.from_array(b), PoolingMode.ROI_POOL)


def roi_align_reference(featmap: np.ndarray, box, out=(7, 7), bandwidth=1, sampling_ratio: int = 1) -> np.ndarray:
    """Brute-force tent-kernel RoIAlign: enumerate every map node for every sample."""
    c, h, w = featmap.shape
    x1, y1, x2, y2 = [float(v) for v in as_box_array(box)[0]]
    oh, ow = _pair(out)
    bx, by = _pair(bandwidth)
    s = sampling_ratio
    res = np.zeros((c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            acc = np.zeros(c)
            for qy in range(s):
                for qx in range(s):
                    py = y1 + (i + (qy + 0.5) / s) * (y2 - y1) / oh
                    px = x1 + (j + (qx + 0.5) / s) * (x2 - x1) / ow
                    num = np.zeros(c)
                    den = 0.0
                    for v in range(h):
                        for u in range(w):
                            k = max(0.0, 1 - abs(px - u) / bx) * max(0.0, 1 - abs(py - v) / by)
                            if k > 0:
                                num += k * featmap[:, v, u]
                                den += k
                    if den > 0:
                        acc += num / den
            res[:, i, j] = acc / (s * s)
    return res


def roi_pool_reference(featmap: np.ndarray, box, out=(7, 7)) -> np.ndarray:
    """Exhaustive per-bin maximum using membership tests on every node."""
    c, h, w = featmap.shape
    x1, y1, x2, y2 = [float(v) for v in as_box_array(box)[0]]
    oh, ow = _pair(out)
    sx, ex = math.floor(x1 + 0.5), math.floor(x2 + 0.5)
    sy, ey = math.floor(y1 + 0.5), math.floor(y2 + 0.5)
    lw, lh = max(ex - sx + 1, 1), max(ey - sy + 1, 1)
    res = np.zeros((c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            members = [
                (v, u) for v in range(h) for u in range(w)
                if sy + math.floor(i * lh / oh) <= v < sy + math.ceil((i + 1) * lh / oh)
                and sx + math.floor(j * lw / ow) <= u < sx + math.ceil((j + 1) * lw / ow)
            ]
            if members:
                res[:, i, j] = np.max([featmap[:, v, u] for v, u in members], axis=0)
    return res


@dataclass
class BatchCache:
    """What :func:`extract_batch_backward` needs to route gradients to the map."""

    mode: PoolingMode
    featmap_shape: tuple
    pre_shape: tuple
    wy: np.ndarray | None = None
    wx: np.ndarray | None = None
    pool_argmax: np.ndarray | None = None
    roi_argmax: np.ndarray | None = None


def extract_batch(featmap: np.ndarray, boxes, mode: PoolingMode | str = PoolingMode.ADAPTIVE,
                  out=(7, 7), feature_stride: float = 1.0, offset: float = 0.0,
                  sampling_ratio: int = 1, pool: bool = True, return_cache: bool = False):
    """Extract one fixed-size feature per box, in input order.

    ``boxes`` are in the same pixel frame as the network input; they are
    projected with ``feature_stride`` and ``offset``. With ``pool`` the
    ``out``-sized features are reduced by a 3x3/2 max pool (7x7 -> 3x3).
    Returns an ``(N, C, h, w)`` array, plus a :class:`BatchCache` when
    ``return_cache`` is set.
    """
    _check_featmap(featmap)
    mode = PoolingMode(mode)
    out = _pair(out)
    proj = project_box(as_box_array(boxes), feature_stride, offset)
    n = proj.shape[0]
    c = featmap.shape[0]
    cache = BatchCache(mode, featmap.shape, (n, c) + out)
    pre = np.empty((n, c) + out)
    if mode is PoolingMode.ROI_POOL:
        pre, cache.roi_argmax = _roi_pool_batch(featmap, proj, out, with_argmax=return_cache)
    else:
        try:
            _check_extent(proj)
        except DegenerateBoxError as exc:
            raise DegenerateBoxError(str(exc)) from None
        if mode is PoolingMode.ADAPTIVE:
            bw = np.stack([
                np.maximum(1.0, round_half_up((proj[:, 2] - proj[:, 0]) / out[1])),
                np.maximum(1.0, round_half_up((proj[:, 3] - proj[:, 1]) / out[0])),
            ], axis=1)
        else:
            bw = np.ones((n, 2))
        wy, wx = _align_weights(featmap, proj, out, bw, sampling_ratio)
        sy, sx = _supports(wy), _supports(wx)
        for k in range(n):
            pre[k] = _apply_separable(featmap, wy[k], wx[k], sy[k], sx[k])
        cache.wy, cache.wx = wy, wx
    if not pool:
        return (pre, cache) if return_cache else pre
    if return_cache:
        pooled, cache.pool_argmax = maxpool2d(pre.reshape(n * c, *out), 3, 2)
    else:
        pooled = maxpool2d(pre.reshape(n * c, *out), 3, 2, return_indices=False)
    pooled = pooled.reshape((n, c) + pooled.shape[1:])
    return (pooled, cache) if return_cache else pooled


def extract_batch_backward(grad: np.ndarray, cache: BatchCache) -> np.ndarray:
    """Gradient of :func:`extract_batch` w.r.t. the feature map."""
    n, c, oh, ow = cache.pre_shape
    if cache.pool_argmax is not None:
        g = maxpool2d_backward(grad.reshape(n * c, *grad.shape[2:]), cache.pool_argmax, (n * c, oh, ow))
        g = g.reshape(cache.pre_shape)
    else:
        g = grad
    d_map = np.zeros(cache.featmap_shape)
    if cache.mode is PoolingMode.ROI_POOL:
        _, h, w = cache.featmap_shape
        flat = d_map.reshape(c, h * w)
        valid = cache.roi_argmax >= 0
        chan = np.broadcast_to(np.arange(c)[None, :, None, None], cache.roi_argmax.shape)
        np.add.at(flat, (chan[valid], cache.roi_argmax[valid]), g[valid])
        return d_map
    # d_map += wy^T g wx, summed over boxes
    tmp = np.einsum("nih,ncij->nchj", cache.wy, g)
    d_map += np.einsum("nchj,njw->chw", tmp, cache.wx)
    return d_map


def extract_features(featmap: np.ndarray, boxes: Sequence, mode: PoolingMode | str, **kw) -> list[RoiFeature]:
    """List-of-:class:`RoiFeature` view of :func:`extract_batch`."""
    arr = as_box_array(boxes)
    vals = extract_batch(featmap, arr, mode, **kw)
    m = PoolingMode(mode)
    return [RoiFeature(vals[k], Box.from_array(arr[k]), m) for k in range(arr.shape[0])]
