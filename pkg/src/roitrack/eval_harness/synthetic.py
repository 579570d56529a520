"""Procedural tracking sequences: a textured target moving over a textured background."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import GenerationError
from ..sequences import Sequence, quantize

TEXTURE_SIDE = 48


@dataclass(frozen=True)
class SyntheticSpec:
    frame_size: tuple = (128, 128)        # (width, height)
    target_size: tuple = (32.0, 32.0)     # (width, height) at frame 0
    texture_seed: int = 0
    velocity: tuple = (0.0, 0.0)          # px / frame
    motion_noise: float = 0.0             # std of per-frame jitter, px
    scale_drift: float = 0.0              # relative size change per frame
    n_distractors: int = 0
    distractor_similarity: float = 0.0    # 1.0 = exact copy of target texture
    illumination_drift: float = 0.0       # brightness change over the sequence
    length: int = 120
    start: tuple | None = None            # initial target centre; default frame centre
    min_scale: float = 0.6
    max_scale: float = 1.6
    target_colour: tuple | None = None    # mean RGB of the target; default random


@dataclass
class SyntheticSequence(Sequence):
    target_texture: np.ndarray | None = None
    distractor_textures: list = field(default_factory=list)
    distractor_boxes: np.ndarray | None = None


def make_texture(rng: np.random.Generator, side: int = TEXTURE_SIDE, smooth: float = 2.0,
                 contrast: float = 1.0, base=None) -> np.ndarray:
    """Smoothed colour noise in [0, 1], shape (side, side, 3)."""
    noise = rng.standard_normal((side, side, 3))
    tex = np.stack([ndimage.gaussian_filter(noise[..., c], smooth, mode="wrap") for c in range(3)], axis=-1)
    tex = (tex - tex.mean()) / (tex.std() + 1e-12)
    colour = rng.uniform(0.2, 0.8, size=3) if base is None else np.asarray(base)
    return np.clip(colour + 0.25 * contrast * tex, 0.0, 1.0)


def _render_patch(frame: np.ndarray, texture: np.ndarray, box: np.ndarray) -> None:
    """Paint ``texture`` into the pixels whose centres fall inside ``box``."""
    h, w = frame.shape[:2]
    x1, y1, x2, y2 = box
    c0, c1 = max(int(np.ceil(x1 - 0.5)), 0), min(int(np.floor(x2 - 0.5)), w - 1)
    r0, r1 = max(int(np.ceil(y1 - 0.5)), 0), min(int(np.floor(y2 - 0.5)), h - 1)
    if c1 < c0 or r1 < r0:
        return
    th, tw = texture.shape[:2]
    cols = (np.arange(c0, c1 + 1) + 0.5 - x1) / (x2 - x1) * tw - 0.5
    rows = (np.arange(r0, r1 + 1) + 0.5 - y1) / (y2 - y1) * th - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    for ch in range(3):
        frame[r0:r1 + 1, c0:c1 + 1, ch] = ndimage.map_coordinates(
            texture[..., ch], [rr, cc], order=1, mode="nearest", prefilter=False)


def _step_box(centre, vel, size, frame_size, rng, noise):
    centre = centre + vel + (noise * rng.standard_normal(2) if noise > 0 else 0.0)
    vel = vel.copy()
    half = size / 2
    for a in range(2):
        lo, hi = half[a], frame_size[a] - half[a]
        if centre[a] < lo:
            centre[a] = 2 * lo - centre[a]
            vel[a] = abs(vel[a])
        elif centre[a] > hi:
            centre[a] = 2 * hi - centre[a]
            vel[a] = -abs(vel[a])
        centre[a] = min(max(centre[a], lo), hi)
    return centre, vel


def generate_sequence(spec: SyntheticSpec, seed: int, name: str = "synthetic") -> SyntheticSequence:
    """Render ``spec.length`` frames; fully determined by ``(spec, seed)``."""
    fw, fh = spec.frame_size
    size0 = np.asarray(spec.target_size, dtype=np.float64)
    if np.any(size0 * spec.max_scale >= np.array([fw, fh])) or np.any(size0 <= 1):
        raise GenerationError("target (at its largest scale) must fit inside the frame")
    if spec.length < 1:
        raise GenerationError("length must be >= 1")
    if not 0.0 <= spec.distractor_similarity <= 1.0:
        raise GenerationError("distractor similarity must lie in [0, 1]")
    start = np.array(spec.start if spec.start is not None else (fw / 2, fh / 2), dtype=np.float64)
    if np.any(start - size0 / 2 < 0) or np.any(start + size0 / 2 > np.array([fw, fh])):
        raise GenerationError("initial target box must lie inside the frame")

    tex_rng = np.random.default_rng(spec.texture_seed)
    target_tex = make_texture(tex_rng, smooth=2.0, contrast=1.6, base=spec.target_colour)
    rng = np.random.default_rng(seed)
    bg_small = make_texture(rng, side=max(fw, fh) // 4, smooth=3.0, contrast=0.8)
    background = ndimage.zoom(bg_small, (fh / bg_small.shape[0], fw / bg_small.shape[1], 1), order=1)[:fh, :fw]

    distractor_tex, d_centre, d_vel = [], [], []
    for _ in range(spec.n_distractors):
        other = make_texture(rng, smooth=2.0, contrast=1.6)
        distractor_tex.append(spec.distractor_similarity * target_tex + (1 - spec.distractor_similarity) * other)
        d_centre.append(np.array([rng.uniform(size0[0], fw - size0[0]), rng.uniform(size0[1], fh - size0[1])]))
        d_vel.append(rng.normal(0, 1.0, size=2))

    centre = start.copy()
    vel = np.asarray(spec.velocity, dtype=np.float64).copy()
    scale = 1.0
    drift = spec.scale_drift
    frames, boxes, dboxes = [], [], []
    for t in range(spec.length):
        if t > 0:
            scale *= 1.0 + drift
            if scale > spec.max_scale or scale < spec.min_scale:
                drift = -drift
                scale = min(max(scale, spec.min_scale), spec.max_scale)
            centre, vel = _step_box(centre, vel, size0 * scale, (fw, fh), rng, spec.motion_noise)
        size = size0 * scale
        frame = background.copy()
        fb = []
        for k in range(spec.n_distractors):
            if t > 0:
                d_centre[k], d_vel[k] = _step_box(d_centre[k], d_vel[k], size0, (fw, fh), rng, 0.0)
            dbox = np.concatenate([d_centre[k] - size0 / 2, d_centre[k] + size0 / 2])
            _render_patch(frame, distractor_tex[k], dbox)
            fb.append(dbox)
        box = np.concatenate([centre - size / 2, centre + size / 2])
        _render_patch(frame, target_tex, box)
        gain = 1.0 + spec.illumination_drift * (t / max(spec.length - 1, 1))
        frames.append(quantize(np.clip(frame * gain, 0.0, 1.0)))
        boxes.append(box)
        dboxes.append(fb)
    return SyntheticSequence(
        name, frames, np.array(boxes),
        target_texture=target_tex, distractor_textures=distractor_tex,
        distractor_boxes=np.array(dboxes) if spec.n_distractors else None,
    )


TIERS = ("static", "linear", "scale", "distractor")


def tier_spec(tier: str, index: int, length: int = 120) -> SyntheticSpec:
    """Spec for the ``index``-th sequence of a difficulty tier."""
    rs = np.random.default_rng(1000 + 17 * TIERS.index(tier) + index)
    angle = rs.uniform(0, 2 * np.pi)
    speed = rs.uniform(1.0, 2.0)
    common = dict(texture_seed=100 + 10 * TIERS.index(tier) + index, length=length,
                  target_size=(float(rs.uniform(28, 36)), float(rs.uniform(28, 36))))
    if tier == "static":
        return SyntheticSpec(motion_noise=0.5, **common)
    if tier == "linear":
        return SyntheticSpec(velocity=(speed * np.cos(angle), speed * np.sin(angle)), **common)
    if tier == "scale":
        return SyntheticSpec(velocity=(0.5 * np.cos(angle), 0.5 * np.sin(angle)),
                             scale_drift=float(rs.choice([-1, 1]) * rs.uniform(0.006, 0.01)), **common)
    if tier == "distractor":
        return SyntheticSpec(velocity=(speed * np.cos(angle), speed * np.sin(angle)), n_distractors=2,
                             distractor_similarity=0.5, illumination_drift=0.2, **common)
    raise GenerationError(f"unknown tier {tier!r}")


def standard_suite(per_tier: int = 3, length: int = 120, tiers=TIERS) -> list[tuple[str, SyntheticSpec, int]]:
    """The fixed benchmark suite: ``(name, spec, seed)`` per sequence."""
    suite = []
    for tier in tiers:
        for i in range(per_tier):
            suite.append((f"{tier}-{i}", tier_spec(tier, i, length), 7000 + 100 * TIERS.index(tier) + i))
    return suite


def training_domains(n_domains: int = 3, length: int = 20, seed: int = 0) -> list[SyntheticSequence]:
    """Same-sized, same-coloured targets with distinct textures, one sequence per domain.

    Texture seeds are disjoint from the benchmark suite, so trackers are
    always evaluated on unseen targets.
    """
    rs = np.random.default_rng(50_000 + seed)
    colour = tuple(float(c) for c in rs.uniform(0.3, 0.7, size=3))
    out = []
    for d in range(n_domains):
        angle = rs.uniform(0, 2 * np.pi)
        speed = rs.uniform(0.5, 1.5)
        spec = SyntheticSpec(texture_seed=90_000 + 101 * seed + d, length=length,
                             velocity=(speed * np.cos(angle), speed * np.sin(angle)), motion_noise=0.5,
                             target_colour=colour)
        out.append(generate_sequence(spec, 60_000 + 101 * seed + d, name=f"domain-{d}"))
    return out
