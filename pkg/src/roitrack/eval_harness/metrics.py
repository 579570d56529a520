"""OTB-style success and precision curves."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..boxes import as_box_array, center_distance, iou_matrix
from ..errors import ArgumentError

SUCCESS_THRESHOLDS = np.round(np.arange(0, 101) * 0.01, 2)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)


@dataclass
class EvalResult:
    success: np.ndarray      # fraction of frames with IoU >= t, t in SUCCESS_THRESHOLDS
    precision: np.ndarray    # fraction with centre error <= e, e in PRECISION_THRESHOLDS
    auc: float
    precision_20: float
    ious: np.ndarray
    center_errors: np.ndarray

    def as_dict(self) -> dict:
        return {
            "auc": self.auc,
            "precision_20": self.precision_20,
            "mean_iou": float(self.ious.mean()),
            "success": self.success.tolist(),
            "precision": self.precision.tolist(),
        }


def per_frame_iou(tracked, gt) -> np.ndarray:
    a, b = as_box_array(tracked), as_box_array(gt)
    if a.shape[0] != b.shape[0]:
        raise ArgumentError(f"{a.shape[0]} tracked boxes but {b.shape[0]} ground-truth boxes")
    # row-wise IoU; iou_matrix on the diagonal blocks keeps one code path
    return np.array([iou_matrix(a[i:i + 1], b[i:i + 1])[0, 0] for i in range(a.shape[0])])


def evaluate(tracked, gt) -> EvalResult:
    """Success curve over IoU thresholds 0:0.01:1 and precision over 0:1:50 px.

    AUC is the mean of the success curve; success counts ``IoU >= t``.
    """
    ious = per_frame_iou(tracked, gt)
    if ious.size == 0:
        raise ArgumentError("need at least one frame")
    err = center_distance(tracked, gt)
    success = (ious[None, :] >= SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    precision = (err[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    return EvalResult(success, precision, float(success.mean()), float(precision[20]), ious, err)


def merge(results: list[EvalResult]) -> EvalResult:
    """Pool per-frame errors of several sequences into one result."""
    ious = np.concatenate([r.ious for r in results])
    err = np.concatenate([r.center_errors for r in results])
    success = (ious[None, :] >= SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    precision = (err[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    return EvalResult(success, precision, float(success.mean()), float(precision[20]), ious, err)


def format_curves(result: EvalResult) -> str:
    lines = ["# threshold,success"]
    lines += [f"{t:.2f},{s:.6f}" for t, s in zip(SUCCESS_THRESHOLDS, result.success)]
    lines.append("# threshold_px,precision")
    lines += [f"{int(t)},{p:.6f}" for t, p in zip(PRECISION_THRESHOLDS, result.precision)]
    return "\n".join(lines)
