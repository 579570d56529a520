"""Rejection sampling of training boxes around a ground truth."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .boxes import as_box_array, corners_to_cxcywh, cxcywh_to_corners, iou_many
from .errors import ArgumentError, SamplingExhaustedError

MAX_DRAWS = 10_000
DRAWS_PER_BOX = 50
MIN_SIDE = 4.0       # thinnest sample box kept after clipping, px


@dataclass(frozen=True)
class Proposal:
    """How candidate boxes are perturbed away from the reference box.

    ``kind`` is ``"gaussian"`` (centre offsets ~ N(0, trans * s) with
    ``s = mean(w, h)``, log-size offsets ~ N(0, scale)), ``"uniform"`` (centre
    anywhere inside ``bounds``, log-size as for gaussian) or ``"mixed"`` (half
    of each).
    """

    kind: str = "gaussian"
    trans: float = 0.1
    scale: float = 0.2
    aspect: bool = True

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform", "mixed"):
            raise ArgumentError(f"unknown proposal kind {self.kind!r}")


POSITIVE = Proposal("gaussian", 0.1, 0.2)
NEGATIVE = Proposal("mixed", 0.5, 0.5)


def iou_at_least(t: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda v: v >= t


def iou_above(t: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda v: v > t


def iou_below(t: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda v: v < t


def draw_proposals(rng: np.random.Generator, ref: np.ndarray, n: int, proposal: Proposal,
                   bounds: np.ndarray) -> np.ndarray:
    cx, cy, w, h = corners_to_cxcywh(ref)
    s = (w + h) / 2
    if proposal.kind == "mixed":
        n_u = n // 2
        return np.concatenate([
            draw_proposals(rng, ref, n - n_u, Proposal("gaussian", proposal.trans, proposal.scale, proposal.aspect), bounds),
            draw_proposals(rng, ref, n_u, Proposal("uniform", proposal.trans, proposal.scale, proposal.aspect), bounds),
        ])
    z = rng.standard_normal((n, 4))
    if proposal.kind == "gaussian":
        ncx = cx + proposal.trans * s * z[:, 0]
        ncy = cy + proposal.trans * s * z[:, 1]
    else:
        u = rng.random((n, 2))
        ncx = bounds[0] + u[:, 0] * (bounds[2] - bounds[0])
        ncy = bounds[1] + u[:, 1] * (bounds[3] - bounds[1])
    log_s = proposal.scale * z[:, 2]
    log_a = proposal.scale * 0.5 * z[:, 3] if proposal.aspect else 0.0
    nw = w * np.exp(log_s + log_a)
    nh = h * np.exp(log_s - log_a)
    return cxcywh_to_corners(np.stack([ncx, ncy, nw, nh], axis=1))


def sample_boxes(rng: np.random.Generator, gt, count: int, predicate: Callable[[np.ndarray], np.ndarray],
                 proposal: Proposal, bounds, min_size: float = MIN_SIDE, max_draws: int | None = None,
                 ref=None) -> np.ndarray:
    """Draw ``count`` boxes whose IoU with ``gt`` satisfies ``predicate``.

    Proposals are perturbations of ``ref`` (default ``gt``), clipped to
    ``bounds = (x1, y1, x2, y2)``; boxes thinner than ``min_size`` after
    clipping are discarded. Raises :class:`SamplingExhaustedError` once
    ``max_draws`` proposals have been tried (default: the larger of
    ``MAX_DRAWS`` and ``DRAWS_PER_BOX * count``).
    """
    if count < 1:
        raise ArgumentError("count must be >= 1")
    gt = as_box_array(gt)[0]
    ref = gt if ref is None else as_box_array(ref)[0]
    bounds = np.asarray(bounds, dtype=np.float64)
    if max_draws is None:
        max_draws = max(MAX_DRAWS, DRAWS_PER_BOX * count)
    kept = []
    have = 0
    drawn = 0
    while have < count:
        if drawn >= max_draws:
            raise SamplingExhaustedError(f"only {have} of {count} boxes satisfied the IoU gate after {drawn} draws")
        batch = min(max(2 * (count - have), 64), max_draws - drawn)
        cand = draw_proposals(rng, ref, batch, proposal, bounds)
        drawn += batch
        cand[:, [0, 2]] = np.clip(cand[:, [0, 2]], bounds[0], bounds[2])
        cand[:, [1, 3]] = np.clip(cand[:, [1, 3]], bounds[1], bounds[3])
        ok = (cand[:, 2] - cand[:, 0] >= min_size) & (cand[:, 3] - cand[:, 1] >= min_size)
        cand = cand[ok]
        if cand.shape[0]:
            cand = cand[predicate(iou_many(cand, gt))]
        take = cand[: count - have]
        kept.append(take)
        have += take.shape[0]
    return np.concatenate(kept)
