"""Axis-aligned boxes and overlap measures.

Boxes are corner-form ``(x1, y1, x2, y2)`` in continuous pixel coordinates:
pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``. Bulk code works on ``(N, 4)``
float arrays; :class:`Box` is the scalar convenience wrapper.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBoxError


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DegenerateBoxError(f"box must have positive extent: {self}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "Box":
        return cls(float(x), float(y), float(x + w), float(y + h))

    @classmethod
    def from_center(cls, cx, cy, w, h) -> "Box":
        return cls(float(cx - w / 2), float(cy - h / 2), float(cx + w / 2), float(cy + h / 2))

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(*(float(v) for v in a))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def to_xywh(self) -> tuple[float, float, float, float]:
        return self.x1, self.y1, self.width, self.height

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        return cx, cy, self.width, self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def as_box_array(boxes) -> np.ndarray:
    """Coerce a Box, a sequence of Boxes, or an array into an ``(N, 4)`` array."""
    if isinstance(boxes, Box):
        return boxes.as_array()[None]
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
    else:
        boxes = list(boxes)
        if boxes and isinstance(boxes[0], Box):
            arr = np.array([b.as_array() for b in boxes], dtype=np.float64)
        else:
            arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    return arr.reshape(-1, 4)


def xywh_to_corners(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.concatenate([a[..., :2], a[..., :2] + a[..., 2:]], axis=-1)


def corners_to_xywh(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.concatenate([a[..., :2], a[..., 2:] - a[..., :2]], axis=-1)


def corners_to_cxcywh(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    wh = a[..., 2:] - a[..., :2]
    return np.concatenate([a[..., :2] + wh / 2, wh], axis=-1)


def cxcywh_to_corners(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    half = a[..., 2:] / 2
    return np.concatenate([a[..., :2] - half, a[..., :2] + half], axis=-1)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    return float(iou_matrix(as_box_array(a), as_box_array(b))[0, 0])


def iou_many(boxes, ref) -> np.ndarray:
    """IoU of every row of ``boxes`` against the single box ``ref``."""
    return iou_matrix(as_box_array(boxes), as_box_array(ref))[:, 0]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def center_distance(a, b) -> np.ndarray:
    ca = corners_to_cxcywh(as_box_array(a))[:, :2]
    cb = corners_to_cxcywh(as_box_array(b))[:, :2]
    return np.linalg.norm(ca - cb, axis=1)


def clip_boxes(boxes: np.ndarray, width: float, height: float, x0: float = 0.0, y0: float = 0.0) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], x0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], y0, height)
    return out
