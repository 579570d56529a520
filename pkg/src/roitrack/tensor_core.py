"""Layer primitives with hand-written backward passes, SGD and checkpoint I/O.

Tensors are plain ``numpy.ndarray`` objects. Spatial layers work on a single
image laid out as ``(channels, height, width)``; fully connected layers work
on row batches ``(n, features)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError, NumericError

__all__ = [
    "LayerGrad", "SgdState", "GradientAccumulator",
    "conv2d", "conv2d_backward", "conv_output_extent",
    "maxpool2d", "maxpool2d_backward",
    "relu", "relu_backward", "lrn", "lrn_backward",
    "linear", "linear_backward",
    "sgd_step", "accumulate_gradients",
    "save_checkpoint", "load_checkpoint", "checkpoint_bytes",
    "numerical_gradient", "relative_error",
]


@dataclass
class LayerGrad:
    d_input: np.ndarray
    d_params: list = field(default_factory=list)


def conv_output_extent(size: int, kernel: int, stride: int = 1, dilation: int = 1, pad: int = 0) -> int:
    effective = kernel + (kernel - 1) * (dilation - 1)
    return (size + 2 * pad - effective) // stride + 1


def _check_conv_args(x, weight, bias, stride, dilation, pad):
    if stride < 1 or dilation < 1:
        raise ArgumentError(f"stride and dilation must be >= 1, got {stride}, {dilation}")
    if pad < 0:
        raise ArgumentError(f"padding must be >= 0, got {pad}")
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"expected input (C,H,W) and weight (O,C,kh,kw), got {x.shape}, {weight.shape}")
    if weight.shape[1] != x.shape[0]:
        raise DimensionError(f"input has {x.shape[0]} channels, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match {weight.shape[0]} filters")
    kh, kw = weight.shape[2:]
    ho = conv_output_extent(x.shape[1], kh, stride, dilation, pad)
    wo = conv_output_extent(x.shape[2], kw, stride, dilation, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {x.shape[1:]} smaller than dilated kernel extent")
    return ho, wo


def _windows(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    # read-only view of shape (C, kh, kw, ho, wo)
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, ho, wo),
        strides=(s0, s1 * dilation, s2 * dilation, s1 * stride, s2 * stride),
        writeable=False,
    )


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, dilation: int = 1, pad: int = 0) -> np.ndarray:
    """2-D cross-correlation of a single ``(C, H, W)`` image.

    The output extent along each axis is
    ``(size + 2*pad - (k + (k-1)*(dilation-1))) // stride + 1``.
    """
    ho, wo = _check_conv_args(x, weight, bias, stride, dilation, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)
    rows = _active_taps(np.any(weight != 0, axis=(0, 1, 3)))
    cols_ = _active_taps(np.any(weight != 0, axis=(0, 1, 2)))
    if rows is None or cols_ is None:
        out = np.zeros((weight.shape[0], ho, wo), dtype=np.result_type(x, weight))
    else:
        # all-zero tap rows/columns are skipped, so a zero-inflated kernel
        # reduces to the equivalent dilated one
        (r0, sr, nr), (c0, sc, nc) = rows, cols_
        compact = weight[:, :, r0:r0 + sr * (nr - 1) + 1:sr, c0:c0 + sc * (nc - 1) + 1:sc]
        view = xp[:, r0 * dilation:, c0 * dilation:]
        win = np.lib.stride_tricks.as_strided(
            view, shape=(xp.shape[0], nr, nc, ho, wo),
            strides=(view.strides[0], view.strides[1] * dilation * sr, view.strides[2] * dilation * sc,
                     view.strides[1] * stride, view.strides[2] * stride),
            writeable=False,
        )
        out = np.tensordot(compact, win, axes=([1, 2, 3], [0, 1, 2]))
    if bias is not None:
        out += bias[:, None, None]
    return out


def _active_taps(mask: np.ndarray):
    """(first, step, count) of the progression covering the nonzero taps."""
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return None
    if idx.size == 1:
        return int(idx[0]), 1, 1
    step = int(np.gcd.reduce(np.diff(idx)))
    return int(idx[0]), step, int((idx[-1] - idx[0]) // step + 1)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray,
                    stride: int = 1, dilation: int = 1, pad: int = 0) -> LayerGrad:
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias."""
    ho, wo = _check_conv_args(x, weight, None, stride, dilation, pad)
    if grad_out.shape != (weight.shape[0], ho, wo):
        raise DimensionError(f"upstream gradient {grad_out.shape} != output shape {(weight.shape[0], ho, wo)}")
    kh, kw = weight.shape[2:]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)
    cols = _windows(xp, kh, kw, ho, wo, stride, dilation)
    d_weight = np.tensordot(grad_out, cols, axes=([1, 2], [3, 4]))
    d_bias = grad_out.sum(axis=(1, 2))

    d_cols = np.tensordot(weight, grad_out, axes=([0], [0]))  # (C, kh, kw, ho, wo)
    d_xp = np.zeros_like(xp, dtype=np.result_type(grad_out, weight))
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r, c = i * dilation, j * dilation
            d_xp[:, r:r + h_span:stride, c:c + w_span:stride] += d_cols[:, i, j]
    d_x = d_xp[:, pad:pad + x.shape[1], pad:pad + x.shape[2]] if pad else d_xp
    return LayerGrad(np.ascontiguousarray(d_x), [d_weight, d_bias])


def maxpool2d(x: np.ndarray, kernel: int, stride: int | None = None, return_indices: bool = True):
    """Windowed max over ``(C, H, W)``.

    Returns the pooled array and, for each output cell, the flat index
    (into ``H*W``) of the winning input. Ties go to the lowest flat index.
    With ``return_indices=False`` only the pooled array is returned.
    """
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1:
        raise ArgumentError("kernel and stride must be >= 1")
    if x.ndim != 3:
        raise DimensionError(f"expected (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"kernel {kernel} exceeds input extent {(h, w)}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    if not return_indices:
        out = None
        for i in range(kernel):
            for j in range(kernel):
                tap = x[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                out = tap.copy() if out is None else np.maximum(out, tap, out=out)
        return out
    x = np.ascontiguousarray(x)
    s0, s1, s2 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, shape=(c, ho, wo, kernel, kernel),
        strides=(s0, s1 * stride, s2 * stride, s1, s2), writeable=False,
    ).reshape(c, ho, wo, kernel * kernel)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + local // kernel
    cols = np.arange(wo)[None, :] * stride + local % kernel
    return out, rows * w + cols


def maxpool2d_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape: Sequence[int]) -> np.ndarray:
    if grad_out.shape != argmax.shape:
        raise DimensionError(f"gradient {grad_out.shape} != pooled shape {argmax.shape}")
    c, h, w = input_shape
    d_x = np.zeros((c, h * w), dtype=grad_out.dtype)
    chan = np.broadcast_to(np.arange(c)[:, None, None], argmax.shape)
    np.add.at(d_x, (chan.ravel(), argmax.ravel()), grad_out.ravel())
    return d_x.reshape(c, h, w)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return grad_out * (x > 0)


def lrn(x: np.ndarray, size: int = 5, alpha: float = 1e-4, beta: float = 0.75, k: float = 2.0) -> np.ndarray:
    """Cross-channel local response normalisation (AlexNet/VGG-M form)."""
    return x * _lrn_scale(x, size, alpha, k) ** (-beta)


def _lrn_window_sum(v: np.ndarray, size: int) -> np.ndarray:
    c = v.shape[0]
    half = size // 2
    csum = np.concatenate([np.zeros((1,) + v.shape[1:]), np.cumsum(v, axis=0)])
    lo = np.clip(np.arange(c) - half, 0, c)
    hi = np.clip(np.arange(c) + half + 1, 0, c)
    return csum[hi] - csum[lo]


def _lrn_scale(x, size, alpha, k):
    return k + (alpha / size) * _lrn_window_sum(x * x, size)


def lrn_backward(grad_out: np.ndarray, x: np.ndarray, size: int = 5, alpha: float = 1e-4,
                 beta: float = 0.75, k: float = 2.0) -> np.ndarray:
    scale = _lrn_scale(x, size, alpha, k)
    y = x * scale ** (-beta)
    inner = _lrn_window_sum(grad_out * y / scale, size)
    return grad_out * scale ** (-beta) - (2.0 * alpha * beta / size) * x * inner


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"cannot apply weight {weight.shape} to input {x.shape}")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out += bias
    return out


def linear_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray) -> LayerGrad:
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise DimensionError(f"upstream gradient {grad_out.shape} != {(x.shape[0], weight.shape[0])}")
    return LayerGrad(grad_out @ weight, [grad_out.T @ x, grad_out.sum(axis=0)])


@dataclass
class SgdState:
    """Momentum SGD hyper-parameters plus one velocity buffer per parameter."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ArgumentError("learning rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ArgumentError("weight decay must be >= 0")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: SgdState,
             lr_mult: Mapping[str, float] | None = None) -> dict[str, np.ndarray]:
    """One momentum step: ``v = mu*v - lr*(g + wd*p); p = p + v``.

    Only keys present in ``grads`` are updated; the rest are passed through.
    ``lr_mult`` scales the learning rate per parameter name.
    """
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        lr = state.learning_rate * (1.0 if lr_mult is None else lr_mult.get(name, 1.0))
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = state.momentum * v - lr * (g + state.weight_decay * p)
        state.velocity[name] = v
        out[name] = p + v
    return out


def accumulate_gradients(buffer: dict[str, np.ndarray] | None, grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    if buffer is None:
        return {k: np.array(v, copy=True) for k, v in grads.items()}
    for name, g in grads.items():
        if name in buffer:
            if buffer[name].shape != g.shape:
                raise DimensionError(f"buffer for {name} has shape {buffer[name].shape}, got {g.shape}")
            buffer[name] += g
        else:
            buffer[name] = np.array(g, copy=True)
    return buffer


class GradientAccumulator:
    """Sums gradients over ``every`` backward passes, then takes one SGD step."""

    def __init__(self, state: SgdState, every: int = 50, lr_mult: Mapping[str, float] | None = None):
        if every < 1:
            raise ArgumentError("flush interval must be >= 1")
        self.state = state
        self.every = every
        self.lr_mult = lr_mult
        self.buffer: dict[str, np.ndarray] | None = None
        self.count = 0
        self.flushes = 0

    def add(self, grads: Mapping[str, np.ndarray]) -> None:
        self.buffer = accumulate_gradients(self.buffer, grads)
        self.count += 1

    def flush(self, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        if self.buffer is None:
            return dict(params)
        new = sgd_step(params, self.buffer, self.state, self.lr_mult)
        self.buffer = None
        self.count = 0
        self.flushes += 1
        return new

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], bool]:
        """Accumulate ``grads``; flush when the interval is reached."""
        self.add(grads)
        if self.count >= self.every:
            return self.flush(params), True
        return dict(params), False


# Checkpoint container (all integers little-endian):
#   magic    8 bytes  b"RTMDCKPT"
#   version  uint32   (currently 1)
#   count    uint32   number of entries
#   entries, sorted by name:
#     name_len uint16, name utf-8 bytes,
#     ndim uint8, ndim x uint32 extents,
#     prod(extents) x float64 values in row-major order
CHECKPOINT_MAGIC = b"RTMDCKPT"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``||a-b|| / max(||a||, ||b||)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
