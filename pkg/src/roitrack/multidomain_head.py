"""fc4-fc6 classifier with one binary branch per training domain, and its losses.

Scores for a batch are laid out as ``f[n, c, d]``: sample ``n``, class ``c``
(0 = target/positive, 1 = background) and domain branch ``d``. Labels are
integer arrays with 1 for positive samples and 0 for negatives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError
from . import tensor_core as tc

POS = 0
NEG = 1
HEAD_KEYS = ("fc4.W", "fc4.b", "fc5.W", "fc5.b", "fc6.W", "fc6.b")


def init_head_params(in_features: int, width: int, n_domains: int,
                     rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    fan_in = in_features
    for name in ("fc4", "fc5"):
        bound = math.sqrt(6.0 / fan_in)
        params[f"{name}.W"] = rng.uniform(-bound, bound, size=(width, fan_in))
        params[f"{name}.b"] = np.zeros(width)
        fan_in = width
    params["fc6.W"] = new_branches(width, n_domains, rng)
    params["fc6.b"] = np.zeros((n_domains, 2))
    return params


def new_branches(width: int, n_domains: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / width) * 0.1
    return rng.uniform(-bound, bound, size=(n_domains, 2, width))


def n_domains(params) -> int:
    return params["fc6.W"].shape[0]


@dataclass
class HeadCache:
    x: np.ndarray
    h4_pre: np.ndarray
    h4: np.ndarray
    h5_pre: np.ndarray
    h5: np.ndarray
    mask4: np.ndarray | None
    mask5: np.ndarray | None
    in_shape: tuple


def _dropout_mask(shape, rate, rng):
    if rate <= 0 or rng is None:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def head_forward(features: np.ndarray, params: dict[str, np.ndarray], dropout: float = 0.0,
                 rng: np.random.Generator | None = None, keep_cache: bool = False):
    """fc4 -> relu -> fc5 -> relu -> every fc6 branch; returns ``(N, 2, D)`` scores.

    ``features`` is ``(N, C, h, w)`` or already flattened ``(N, F)``.
    Dropout on fc4/fc5 outputs is applied only when ``dropout > 0`` and an
    ``rng`` is given.
    """
    x = features.reshape(features.shape[0], -1)
    if x.shape[1] != params["fc4.W"].shape[1]:
        raise DimensionError(f"flattened feature width {x.shape[1]} != fc4 input {params['fc4.W'].shape[1]}")
    h4_pre = tc.linear(x, params["fc4.W"], params["fc4.b"])
    h4 = tc.relu(h4_pre)
    m4 = _dropout_mask(h4.shape, dropout, rng)
    if m4 is not None:
        h4 = h4 * m4
    h5_pre = tc.linear(h4, params["fc5.W"], params["fc5.b"])
    h5 = tc.relu(h5_pre)
    m5 = _dropout_mask(h5.shape, dropout, rng)
    if m5 is not None:
        h5 = h5 * m5
    # fc6.W: (D, 2, F) -> f: (N, 2, D)
    f = np.einsum("nf,dcf->ncd", h5, params["fc6.W"]) + params["fc6.b"].T[None]
    if keep_cache:
        return f, HeadCache(x, h4_pre, h4, h5_pre, h5, m4, m5, features.shape)
    return f


def head_backward(df: np.ndarray, cache: HeadCache,
                  params: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the head given ``d loss / d f``; returns (param grads, d features)."""
    grads = {
        "fc6.W": np.einsum("ncd,nf->dcf", df, cache.h5),
        "fc6.b": df.sum(axis=0).T,
    }
    dh5 = np.einsum("ncd,dcf->nf", df, params["fc6.W"])
    if cache.mask5 is not None:
        dh5 = dh5 * cache.mask5
    dh5 = tc.relu_backward(dh5, cache.h5_pre)
    lg5 = tc.linear_backward(dh5, cache.h4, params["fc5.W"])
    grads["fc5.W"], grads["fc5.b"] = lg5.d_params
    dh4 = lg5.d_input
    if cache.mask4 is not None:
        dh4 = dh4 * cache.mask4
    dh4 = tc.relu_backward(dh4, cache.h4_pre)
    lg4 = tc.linear_backward(dh4, cache.x, params["fc4.W"])
    grads["fc4.W"], grads["fc4.b"] = lg4.d_params
    return grads, lg4.d_input.reshape(cache.in_shape)


def positive_scores(f: np.ndarray, domain: int = 0) -> np.ndarray:
    """Raw positive-channel score of each sample under one branch."""
    return f[:, POS, domain]


def positive_prob(f: np.ndarray, domain: int = 0) -> np.ndarray:
    """Softmax probability of the target class under one branch."""
    return softmax_cls(f)[:, POS, domain]


def softmax_cls(f: np.ndarray) -> np.ndarray:
    """2-way softmax down each column (target vs background per domain)."""
    z = f - f.max(axis=-2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-2, keepdims=True)


def softmax_inst(f: np.ndarray) -> np.ndarray:
    """D-way softmax along each row (the same class across domains)."""
    z = f - f.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot_labels(labels: np.ndarray, domain: int, n_dom: int) -> np.ndarray:
    """``y[n, c, d]`` with a single 1 at (class of sample n, ``domain``)."""
    labels = np.asarray(labels)
    y = np.zeros((labels.shape[0], 2, n_dom))
    y[np.arange(labels.shape[0]), np.where(labels == 1, POS, NEG), domain] = 1.0
    return y


def _check_batch(f, labels, domain):
    if f.ndim != 3 or f.shape[1] != 2:
        raise DimensionError(f"scores must be (N, 2, D), got {f.shape}")
    if f.shape[0] == 0 or len(labels) != f.shape[0]:
        raise DimensionError("need one label per sample and at least one sample")
    if not 0 <= domain < f.shape[2]:
        raise ArgumentError(f"domain {domain} out of range for {f.shape[2]} branches")


def loss_cls_grad(f: np.ndarray, labels: np.ndarray, domain: int) -> tuple[float, np.ndarray]:
    """Binary cross-entropy on branch ``domain``; returns (loss, dL/df)."""
    labels = np.asarray(labels)
    _check_batch(f, labels, domain)
    n = f.shape[0]
    col = f[:, :, domain]
    z = col - col.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    cls = np.where(labels == 1, POS, NEG)
    loss = -log_p[np.arange(n), cls].sum() / n
    grad = np.zeros_like(f)
    g = np.exp(log_p)
    g[np.arange(n), cls] -= 1.0
    grad[:, :, domain] = g / n
    return float(loss), grad


def loss_cls(f: np.ndarray, labels: np.ndarray, domain: int) -> float:
    return loss_cls_grad(f, labels, domain)[0]


def loss_inst_grad(f: np.ndarray, labels: np.ndarray, domain: int,
                   subset=None) -> tuple[float, np.ndarray]:
    """Instance-embedding loss on the positive row; returns (loss, dL/df).

    The softmax normalises over the branches in ``subset`` (all branches if
    None); only positive samples contribute, but the mean is over the whole
    batch.
    """
    labels = np.asarray(labels)
    _check_batch(f, labels, domain)
    subset = np.arange(f.shape[2]) if subset is None else np.asarray(subset, dtype=np.int64)
    where = np.nonzero(subset == domain)[0]
    if where.size == 0:
        raise ArgumentError(f"active domain {domain} is not in the instance-loss subset")
    k = int(where[0])
    n = f.shape[0]
    pos = labels == 1
    grad = np.zeros_like(f)
    if not pos.any():
        return 0.0, grad
    row = f[pos][:, POS, :][:, subset]
    z = row - row.max(axis=1, keepdims=True)
    log_q = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_q[:, k].sum() / n
    g = np.exp(log_q)
    g[:, k] -= 1.0
    sub = np.zeros((pos.sum(), f.shape[2]))
    sub[:, subset] = g / n
    grad[pos, POS, :] = sub
    return float(loss), grad


def loss_inst(f: np.ndarray, labels: np.ndarray, domain: int, subset=None) -> float:
    return loss_inst_grad(f, labels, domain, subset)[0]


def loss_total(cls: float, inst: float, alpha: float = 0.1) -> float:
    if alpha < 0:
        raise ArgumentError("alpha must be >= 0")
    return cls + alpha * inst
