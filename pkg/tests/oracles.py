"""Slow, direct re-implementations used as test oracles."""
import math

import numpy as np


def tent_align(featmap, box, out=(7, 7), bandwidth=(1, 1)):
    """Evaluate the 2-D tent-kernel sum at every cell centre by enumerating all map nodes."""
    c, h, w = featmap.shape
    x1, y1, x2, y2 = [float(v) for v in box]
    oh, ow = out
    bx, by = bandwidth
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    res = np.zeros((c, oh, ow))
    for i in range(oh):
        py = y1 + (i + 0.5) * (y2 - y1) / oh
        for j in range(ow):
            px = x1 + (j + 0.5) * (x2 - x1) / ow
            k = np.maximum(0.0, 1 - np.abs(px - uu) / bx) * np.maximum(0.0, 1 - np.abs(py - vv) / by)
            if k.sum() > 0:
                res[:, i, j] = (featmap * k).sum(axis=(1, 2)) / k.sum()
    return res


def pool_bins(start, end, n_out):
    """Classical quantised bins: corners rounded half-up, floor/ceil splits."""
    s, e = math.floor(start + 0.5), math.floor(end + 0.5)
    length = max(e - s + 1, 1)
    return [(s + math.floor(j * length / n_out), s + math.ceil((j + 1) * length / n_out)) for j in range(n_out)]


def roi_max_pool(featmap, box, out=(7, 7)):
    c, h, w = featmap.shape
    res = np.zeros((c, out[0], out[1]))
    for i, (y0, y1) in enumerate(pool_bins(box[1], box[3], out[0])):
        for j, (x0, x1) in enumerate(pool_bins(box[0], box[2], out[1])):
            y0c, y1c, x0c, x1c = max(y0, 0), min(y1, h), max(x0, 0), min(x1, w)
            if y1c > y0c and x1c > x0c:
                res[:, i, j] = featmap[:, y0c:y1c, x0c:x1c].max(axis=(1, 2))
    return res


def extent_chain(side, layers):
    """Spatial extent after a list of (kernel, stride, dilation, pad) layers."""
    for k, s, d, p in layers:
        side = (side + 2 * p - (k + (k - 1) * (d - 1))) // s + 1
    return side


def receptive_chain(layers):
    """Receptive field of a stack of (kernel, stride, dilation) layers."""
    rf, jump = 1, 1
    for k, s, d in layers:
        rf += (k - 1) * d * jump
        jump *= s
    return rf
