"""Synthetic tracking sequences and search-region cropping.

Boxes here are in frame pixels, ``(x_tl, y_tl, x_br, y_br)`` with pixel
``i`` covering ``[i, i + 1)``. Crops map them to normalized patch
coordinates in ``[0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class SequenceConfig:
    frame_size: int = 256
    length: int = 50
    target_size: tuple[float, float] = (14.0, 24.0)
    aspect_jitter: float = 0.3
    drift_amplitude: float = 0.25  # fraction of the frame
    drift_period: tuple[float, float] = (40.0, 90.0)  # frames per oscillation
    scale_drift: float = 0.2
    appearance_change: float = 0.6  # blend weight toward a second colour by the last frame
    distractors: int = 2
    distractor_color_shift: float = 0.5  # std of the per-distractor colour offset
    noise: float = 0.02


@dataclass
class SyntheticSequence:
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    gt_boxes: np.ndarray  # (T, 4)
    seed: int
    distractor_boxes: np.ndarray | None = None  # (T, D, 4)

    def __len__(self) -> int:
        return len(self.frames)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.2, 0.8, size=(6, 6, 3))
    smooth = ndimage.zoom(coarse, (size / 6, size / 6, 1), order=3, mode="nearest")[:size, :size]
    grain = ndimage.gaussian_filter(rng.normal(scale=0.12, size=(size, size, 3)), sigma=(1.2, 1.2, 0))
    return np.clip(smooth + grain, 0.0, 1.0)


def _coverage(xs, ys, cx, cy, w, h, ellipse: bool) -> np.ndarray:
    """Soft (one-pixel ramp) coverage of a box or ellipse at pixel centres."""
    if ellipse:
        r = np.sqrt(((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2)
        dist = (1.0 - r) * min(w, h) / 2
        return np.clip(dist + 0.5, 0.0, 1.0)
    dx = np.clip(w / 2 - np.abs(xs - cx) + 0.5, 0.0, 1.0)
    dy = np.clip(h / 2 - np.abs(ys - cy) + 0.5, 0.0, 1.0)
    return dx * dy


def _stamp(img, xs, ys, cx, cy, w, h, ellipse, colors, freq, phase):
    cover = _coverage(xs, ys, cx, cy, w, h, ellipse)[..., None]
    u = (xs - cx) / w
    v = (ys - cy) / h
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (freq[0] * u + freq[1] * v) + phase)
    tex = colors[0] * stripes[..., None] + colors[1] * (1 - stripes[..., None])
    img *= 1 - cover
    img += cover * tex


def make_sequence(seed: int, cfg: SequenceConfig | None = None) -> SyntheticSequence:
    """Render one sequence: a striped target drifting over clutter, plus look-alike distractors."""
    cfg = cfg or SequenceConfig()
    rng = np.random.default_rng(seed)
    n, t_len = cfg.frame_size, cfg.length
    bg = _background(rng, n)
    ys, xs = np.mgrid[0:n, 0:n] + 0.5

    def trajectory(size):
        period = rng.uniform(*cfg.drift_period, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        amp = rng.uniform(0.4, 1.0, size=2) * cfg.drift_amplitude * n
        margin = size / 2 * (1 + cfg.scale_drift) + 2
        lo, hi = margin + amp, n - margin - amp
        centre = rng.uniform(lo, np.maximum(hi, lo))
        t = np.arange(t_len)[:, None]
        return centre + amp * np.sin(2 * np.pi * t / period + phase)

    base = rng.uniform(*cfg.target_size)
    aspect = math.exp(rng.uniform(-cfg.aspect_jitter, cfg.aspect_jitter))
    size0 = np.array([base * aspect, base / aspect])
    ellipse = bool(rng.integers(2))
    colors_a = rng.uniform(0, 1, size=(2, 3))
    colors_b = rng.uniform(0, 1, size=(2, 3))
    freq = rng.uniform(1.0, 2.5, size=2) * rng.choice([-1, 1], size=2)
    path = trajectory(size0.max())
    scale_phase = rng.uniform(0, 2 * np.pi)
    scales = 1 + cfg.scale_drift * np.sin(2 * np.pi * np.arange(t_len) / 60.0 + scale_phase) \
        - cfg.scale_drift * np.sin(scale_phase)

    others = [(trajectory(size0.max()), rng.uniform(0, 2 * np.pi),
               rng.normal(scale=cfg.distractor_color_shift, size=(2, 3))) for _ in range(cfg.distractors)]

    frames = np.empty((t_len, n, n, 3))
    boxes = np.empty((t_len, 4))
    d_boxes = np.empty((t_len, len(others), 4))
    for t in range(t_len):
        img = bg.copy()
        blend = cfg.appearance_change * t / max(t_len - 1, 1)
        colors = (1 - blend) * colors_a + blend * colors_b
        for d, (d_path, d_phase, d_shift) in enumerate(others):
            dx, dy = d_path[t]
            d_boxes[t, d] = np.clip([dx - size0[0] / 2, dy - size0[1] / 2, dx + size0[0] / 2, dy + size0[1] / 2], 0, n)
            _stamp(img, xs, ys, *d_path[t], *size0, ellipse, np.clip(colors + d_shift, 0, 1), freq, d_phase)
        w, h = size0 * scales[t]
        cx, cy = path[t]
        _stamp(img, xs, ys, cx, cy, w, h, ellipse, colors, freq, 0.0)
        img += rng.normal(scale=cfg.noise, size=img.shape)
        frames[t] = np.clip(img, 0.0, 1.0)
        boxes[t] = np.clip([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], 0, n)
    return SyntheticSequence(frames, boxes, seed, d_boxes)


def make_dataset(count: int, seed: int, cfg: SequenceConfig | None = None) -> list[SyntheticSequence]:
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [make_sequence(int(s), cfg) for s in seeds]


# --- cropping -----------------------------------------------------------------------

@dataclass(frozen=True)
class CropTransform:
    """Square crop with top-left corner ``(x0, y0)`` and side ``side`` in frame pixels."""

    x0: float
    y0: float
    side: float
    resolution: int

    def to_patch(self, box) -> np.ndarray:
        """Frame-pixel box to normalized patch coordinates."""
        b = np.asarray(box, dtype=np.float64)
        origin = np.array([self.x0, self.y0, self.x0, self.y0])
        return (b - origin) / self.side

    def to_frame(self, box) -> np.ndarray:
        b = np.asarray(box, dtype=np.float64)
        origin = np.array([self.x0, self.y0, self.x0, self.y0])
        return b * self.side + origin


def crop_geometry(box, area_factor: float, out_resolution: int, center=None, scale: float = 1.0) -> CropTransform:
    """Square crop of ``area_factor`` times the box area, centred on the box.

    ``center`` and ``scale`` shift and resize the crop (used for training jitter).
    """
    x0, y0, x1, y1 = (float(v) for v in box)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise ValueError(f"cannot crop around a zero-area box {box}")
    side = math.sqrt(area_factor * w * h) * scale
    cx, cy = center if center is not None else ((x0 + x1) / 2, (y0 + y1) / 2)
    return CropTransform(cx - side / 2, cy - side / 2, side, out_resolution)


def crop_patch(frame: np.ndarray, box, area_factor: float = 25.0, out_resolution: int = 64, center=None,
               scale: float = 1.0) -> tuple[np.ndarray, CropTransform, np.ndarray]:
    """Bilinear crop-and-resize with zero padding outside the frame.

    Returns the ``(R, R, 3)`` patch, its :class:`CropTransform` and an
    ``(R, R)`` boolean mask that is False where the patch samples fell
    outside the frame.
    """
    tf = crop_geometry(box, area_factor, out_resolution, center, scale)
    r = out_resolution
    step = tf.side / r
    coords = tf.x0 + (np.arange(r) + 0.5) * step, tf.y0 + (np.arange(r) + 0.5) * step
    gx, gy = np.meshgrid(coords[0], coords[1])
    h, w = frame.shape[:2]
    valid = (gx >= 0) & (gx < w) & (gy >= 0) & (gy < h)
    # sample positions in array-index units (pixel centres sit at i + 0.5)
    rows, cols = gy - 0.5, gx - 0.5
    patch = np.empty((r, r, frame.shape[2]))
    for c in range(frame.shape[2]):
        patch[..., c] = ndimage.map_coordinates(frame[..., c], [rows, cols], order=1, mode="nearest")
    patch[~valid] = 0.0
    return patch, tf, valid


def jitter_center_scale(box, rng: np.random.Generator, center_sigma: float, scale_sigma: float,
                        max_offset: float = 1.5):
    """Random crop centre and scale around ``box``.

    The centre moves by a Gaussian with ``center_sigma`` box sizes per axis,
    truncated to ``max_offset`` box sizes; the scale is log-normal.
    """
    x0, y0, x1, y1 = box
    size = math.sqrt((x1 - x0) * (y1 - y0))
    off = np.clip(rng.normal(size=2) * center_sigma, -max_offset, max_offset) * size
    return ((x0 + x1) / 2 + off[0], (y0 + y1) / 2 + off[1]), math.exp(rng.normal() * scale_sigma)
