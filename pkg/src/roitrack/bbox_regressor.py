"""Linear bounding-box refinement fitted on first-frame RoI features.

Targets follow the usual centre-size parameterisation: for a proposal
``p`` and ground truth ``g``,
``t = ((gx - px) / pw, (gy - py) / ph, log(gw / pw), log(gh / ph))``.
Each of the four targets gets a ridge regressor with an unpenalised bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import as_box_array, corners_to_cxcywh, cxcywh_to_corners, iou_many
from .errors import ArgumentError, DimensionError, NumericError

MIN_PAIRS = 8
PAIR_IOU = 0.6
DEFAULT_LAMBDA = 1000.0


@dataclass
class RegressorModel:
    weights: np.ndarray   # (F, 4), columns dx, dy, dw, dh
    bias: np.ndarray      # (4,)
    lam: float

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    def to_tensors(self, prefix: str = "bbr.") -> dict[str, np.ndarray]:
        return {f"{prefix}W": self.weights, f"{prefix}b": self.bias, f"{prefix}lambda": np.array([self.lam])}

    @classmethod
    def from_tensors(cls, tensors, prefix: str = "bbr.") -> "RegressorModel":
        return cls(np.asarray(tensors[f"{prefix}W"]), np.asarray(tensors[f"{prefix}b"]),
                   float(np.asarray(tensors[f"{prefix}lambda"])[0]))


def encode_targets(boxes, gt) -> np.ndarray:
    """Regression targets taking each row of ``boxes`` onto ``gt`` (one box or one per row)."""
    p = corners_to_cxcywh(as_box_array(boxes))
    g = corners_to_cxcywh(as_box_array(gt))
    return np.stack([
        (g[:, 0] - p[:, 0]) / p[:, 2],
        (g[:, 1] - p[:, 1]) / p[:, 3],
        np.log(g[:, 2] / p[:, 2]),
        np.log(g[:, 3] / p[:, 3]),
    ], axis=1)


def decode_targets(boxes, deltas) -> np.ndarray:
    """Inverse of :func:`encode_targets`: shift and rescale ``boxes`` by ``deltas``."""
    p = corners_to_cxcywh(as_box_array(boxes))
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    return cxcywh_to_corners(np.stack([
        p[:, 0] + d[:, 0] * p[:, 2],
        p[:, 1] + d[:, 1] * p[:, 3],
        p[:, 2] * np.exp(d[:, 2]),
        p[:, 3] * np.exp(d[:, 3]),
    ], axis=1))


def _flatten(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def fit_regressor(features, boxes, gt, lam: float = DEFAULT_LAMBDA, min_iou: float = PAIR_IOU) -> RegressorModel:
    """Closed-form ridge fit of the four box targets on flattened features.

    Features are centred before solving so the bias is not shrunk. Every
    box must overlap ``gt`` by at least ``min_iou`` and there must be at
    least eight pairs.
    """
    x = _flatten(features)
    b = as_box_array(boxes)
    if x.shape[0] != b.shape[0]:
        raise DimensionError(f"{x.shape[0]} feature rows but {b.shape[0]} boxes")
    if b.shape[0] < MIN_PAIRS:
        raise ArgumentError(f"need at least {MIN_PAIRS} training pairs, got {b.shape[0]}")
    if lam < 0:
        raise ArgumentError("lambda must be >= 0")
    if np.any(iou_many(b, gt) < min_iou):
        raise ArgumentError(f"every training box must have IoU >= {min_iou} with the ground truth")
    t = encode_targets(b, gt)
    mu_x = x.mean(axis=0)
    mu_t = t.mean(axis=0)
    xc = x - mu_x
    a = xc.T @ xc + lam * np.eye(x.shape[1])
    rhs = xc.T @ (t - mu_t)
    if lam == 0:
        if np.linalg.matrix_rank(a) < a.shape[0]:
            raise NumericError("normal matrix is singular; use lambda > 0")
    try:
        w = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"ridge solve failed: {exc}") from exc
    return RegressorModel(w, mu_t - mu_x @ w, float(lam))


def predict_deltas(model: RegressorModel, features) -> np.ndarray:
    x = _flatten(features)
    if x.shape[1] != model.feature_dim:
        raise DimensionError(f"feature width {x.shape[1]} != regressor width {model.feature_dim}")
    return x @ model.weights + model.bias


def apply_regressor(model: RegressorModel, features, boxes) -> np.ndarray:
    """Refined boxes, one per (feature, box) row."""
    return decode_targets(boxes, predict_deltas(model, features))
