"""Video sequences with one ground-truth box per frame, and their on-disk layout.

A sequence directory holds numbered image files (``0001.png``, ``0002.png``,
...) and ``groundtruth_rect.txt`` with one ``x,y,w,h`` line per frame
(top-left corner, width, height). A dataset directory holds one such
directory per domain.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import corners_to_xywh, xywh_to_corners
from .errors import ArgumentError, StateError

GT_FILE = "groundtruth_rect.txt"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Sequence:
    """Frames (HxWx3 floats in [0, 1]) plus ``(T, 4)`` corner-form ground truth.

    ``frames`` may hold arrays or image paths; paths are decoded on access.
    Every access is logged in ``accessed`` so callers can assert causality.
    """

    name: str
    frames: list
    gt: np.ndarray
    accessed: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=np.float64).reshape(-1, 4)
        if len(self.frames) != self.gt.shape[0]:
            raise ArgumentError(f"{self.name}: {len(self.frames)} frames but {self.gt.shape[0]} boxes")
        if np.any(self.gt[:, 2] <= self.gt[:, 0]) or np.any(self.gt[:, 3] <= self.gt[:, 1]):
            raise ArgumentError(f"{self.name}: ground truth contains a degenerate box")

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, t: int) -> np.ndarray:
        self.accessed.append(t)
        f = self.frames[t]
        if isinstance(f, (str, Path)):
            return read_image(f)
        return f

    @property
    def frame_size(self) -> tuple[int, int]:
        """(width, height) of the first frame."""
        f = self.frames[0]
        if isinstance(f, (str, Path)):
            with Image.open(f) as im:
                return im.size
        return f.shape[1], f.shape[0]


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, frame: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def quantize(frame: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so in-memory frames equal their saved images."""
    return np.clip(np.rint(frame * 255.0), 0, 255) / 255.0


def _frame_number(p: Path) -> int:
    m = re.search(r"(\d+)", p.stem)
    return int(m.group(1)) if m else -1


def read_groundtruth(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        rows.append([float(v) for v in re.split(r"[,\s]+", line)[:4]])
    return xywh_to_corners(np.array(rows, dtype=np.float64))


def write_groundtruth(path, boxes: np.ndarray) -> None:
    lines = [",".join(f"{v:.17g}" for v in row) for row in corners_to_xywh(boxes)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_sequence(directory) -> Sequence:
    d = Path(directory)
    if not (d / GT_FILE).exists():
        raise StateError(f"{d} has no {GT_FILE}")
    images = sorted((p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=_frame_number)
    gt = read_groundtruth(d / GT_FILE)
    return Sequence(d.name, images, gt)


def save_sequence(seq: Sequence, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t in range(len(seq)):
        write_image(d / f"{t + 1:04d}.png", seq.frames[t] if not isinstance(seq.frames[t], (str, Path)) else read_image(seq.frames[t]))
    write_groundtruth(d / GT_FILE, seq.gt)
    return d


def load_dataset(directory) -> list[Sequence]:
    """Every sub-directory with a ground-truth file, sorted by name."""
    root = Path(directory)
    seqs = [load_sequence(p) for p in sorted(root.iterdir()) if p.is_dir() and (p / GT_FILE).exists()]
    if not seqs:
        raise StateError(f"no sequences found under {root}")
    return seqs


def write_results(path, boxes: np.ndarray, scores: np.ndarray) -> None:
    """``frame_index,x,y,w,h,score`` per line (0-based frame index)."""
    xywh = corners_to_xywh(boxes)
    lines = [f"{t},{r[0]:.17g},{r[1]:.17g},{r[2]:.17g},{r[3]:.17g},{s:.17g}"
             for t, (r, s) in enumerate(zip(xywh, scores))]
    Path(path).write_text("\n".join(lines) + "\n")


def read_results(path) -> tuple[np.ndarray, np.ndarray]:
    rows = [[float(v) for v in line.split(",")] for line in Path(path).read_text().splitlines() if line.strip()]
    arr = np.array(rows, dtype=np.float64)
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    return xywh_to_corners(arr[:, 1:5]), arr[:, 5]
