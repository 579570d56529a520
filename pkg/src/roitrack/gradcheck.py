"""Central finite-difference checks of every analytic gradient.

Each check draws random shapes and values, projects the output onto a random
tensor to get a scalar, and compares the analytic gradient with the
numerical one by norm-wise relative error.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import backbone as bb
from . import tensor_core as tc
from .multidomain_head import head_backward, head_forward, init_head_params, loss_cls_grad, loss_inst_grad
from .roi_extract import extract_batch, extract_batch_backward

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<16} n={self.instances:<3} max_rel_err={self.max_error:.3e} ({self.seconds:.2f}s)"


def _compare(analytic: np.ndarray, f: Callable[[], float], x: np.ndarray, rng, max_coords: int | None = None) -> float:
    """Relative error on all coordinates, or on a random subset of them."""
    if max_coords is None or x.size <= max_coords:
        return tc.relative_error(analytic, tc.numerical_gradient(f, x))
    idx = rng.choice(x.size, size=max_coords, replace=False)
    flat = x.reshape(-1)
    num = np.empty(max_coords)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + 1e-5
        fp = f()
        flat[i] = old - 1e-5
        fm = f()
        flat[i] = old
        num[j] = (fp - fm) / 2e-5
    return tc.relative_error(analytic.reshape(-1)[idx], num)


def check_conv(rng) -> float:
    c_in, c_out = rng.integers(1, 4, size=2)
    k = int(rng.choice([1, 3, 5]))
    stride, dil, pad = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(0, 3))
    side = (k - 1) * dil + 1 + int(rng.integers(1, 6))
    x = rng.standard_normal((c_in, side, side + 1))
    w = rng.standard_normal((c_out, c_in, k, k))
    b = rng.standard_normal(c_out)
    r = rng.standard_normal(tc.conv2d(x, w, b, stride, dil, pad).shape)
    lg = tc.conv2d_backward(r, x, w, stride, dil, pad)
    loss = lambda: float(np.sum(tc.conv2d(x, w, b, stride, dil, pad) * r))
    return max(_compare(lg.d_input, loss, x, rng), _compare(lg.d_params[0], loss, w, rng),
               _compare(lg.d_params[1], loss, b, rng))


def check_linear(rng) -> float:
    n, fi, fo = rng.integers(1, 6), rng.integers(1, 8), rng.integers(1, 8)
    x = rng.standard_normal((n, fi))
    w = rng.standard_normal((fo, fi))
    b = rng.standard_normal(fo)
    r = rng.standard_normal((n, fo))
    lg = tc.linear_backward(r, x, w)
    loss = lambda: float(np.sum(tc.linear(x, w, b) * r))
    return max(_compare(lg.d_input, loss, x, rng), _compare(lg.d_params[0], loss, w, rng),
               _compare(lg.d_params[1], loss, b, rng))


def check_lrn(rng) -> float:
    x = rng.standard_normal((int(rng.integers(1, 8)), 3, 4)) * 10
    r = rng.standard_normal(x.shape)
    g = tc.lrn_backward(r, x)
    return _compare(g, lambda: float(np.sum(tc.lrn(x) * r)), x, rng)


def check_maxpool(rng) -> float:
    x = rng.standard_normal((2, int(rng.integers(3, 9)), int(rng.integers(3, 9))))
    y, arg = tc.maxpool2d(x, 3, 2)
    r = rng.standard_normal(y.shape)
    g = tc.maxpool2d_backward(r, arg, x.shape)
    return _compare(g, lambda: float(np.sum(tc.maxpool2d(x, 3, 2)[0] * r)), x, rng)


def check_head(rng) -> float:
    n, fi, width, d = int(rng.integers(2, 6)), int(rng.integers(2, 10)), int(rng.integers(2, 8)), int(rng.integers(1, 4))
    params = init_head_params(fi, width, d, rng)
    for k in params:
        params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
    x = rng.standard_normal((n, fi))
    r = rng.standard_normal((n, 2, d))
    _, cache = head_forward(x, params, keep_cache=True)
    grads, dx = head_backward(r, cache, params)
    loss = lambda: float(np.sum(head_forward(x, params) * r))
    errs = [_compare(dx, loss, x, rng)]
    errs += [_compare(grads[k], loss, params[k], rng) for k in params]
    return max(errs)


def check_loss_cls(rng) -> float:
    n, d = int(rng.integers(1, 8)), int(rng.integers(1, 5))
    f = rng.standard_normal((n, 2, d)) * 2
    labels = rng.integers(0, 2, size=n)
    dom = int(rng.integers(0, d))
    _, g = loss_cls_grad(f, labels, dom)
    return _compare(g, lambda: loss_cls_grad(f, labels, dom)[0], f, rng)


def check_loss_inst(rng) -> float:
    n, d = int(rng.integers(1, 8)), int(rng.integers(2, 6))
    f = rng.standard_normal((n, 2, d)) * 2
    labels = rng.integers(0, 2, size=n)
    labels[0] = 1
    dom = int(rng.integers(0, d))
    others = [k for k in range(d) if k != dom]
    subset = np.sort(np.r_[dom, rng.choice(others, size=int(rng.integers(0, len(others) + 1)), replace=False)])
    _, g = loss_inst_grad(f, labels, dom, subset)
    return _compare(g, lambda: loss_inst_grad(f, labels, dom, subset)[0], f, rng)


def check_roi(rng) -> float:
    fmap = rng.standard_normal((2, int(rng.integers(6, 12)), int(rng.integers(6, 12))))
    n = int(rng.integers(1, 4))
    xy = rng.uniform(0, 4, size=(n, 2))
    boxes = np.c_[xy, xy + rng.uniform(2, 6, size=(n, 2))]
    mode = ["roialign", "adaptive"][int(rng.integers(0, 2))]
    out, cache = extract_batch(fmap, boxes, mode, (7, 7), return_cache=True)
    r = rng.standard_normal(out.shape)
    g = extract_batch_backward(r, cache)
    return _compare(g, lambda: float(np.sum(extract_batch(fmap, boxes, mode, (7, 7)) * r)), fmap, rng)


def check_backbone(rng) -> float:
    variant = [bb.Variant.DENSE, bb.Variant.ORIGINAL][int(rng.integers(0, 2))]
    cfg = bb.BackboneConfig(variant=variant, channels=(2, 3, 2), use_lrn=bool(rng.integers(0, 2)), init_gain=1.0)
    params = bb.init_params(cfg, rng)
    for k in params:
        params[k] = params[k] + 0.05 * rng.standard_normal(params[k].shape)
    side = bb.receptive_field(cfg) + int(rng.integers(0, 8))
    x = rng.standard_normal((3, side, side))
    y, cache = bb.forward_features(x, params, cfg, keep_cache=True)
    r = rng.standard_normal(y.shape)
    grads = bb.backward_features(r, cache, params, cfg)
    loss = lambda: float(np.sum(bb.forward_features(x, params, cfg) * r))
    return max(_compare(grads[k], loss, params[k], rng, max_coords=12) for k in params)


CHECKS: dict[str, Callable] = {
    "conv2d": check_conv,
    "linear": check_linear,
    "lrn": check_lrn,
    "maxpool": check_maxpool,
    "head_fc4-6": check_head,
    "loss_cls": check_loss_cls,
    "loss_inst": check_loss_inst,
    "roi_extract": check_roi,
    "backbone": check_backbone,
}


def run_gradcheck(instances: int = 20, seed: int = 0, names=None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn in CHECKS.items():
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        worst = max(fn(rng) for _ in range(instances))
        results.append(CheckResult(name, instances, worst, time.perf_counter() - t0))
    return results
