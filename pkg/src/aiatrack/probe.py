"""Correlation probes: where the correlation vectors of target keys put their mass.

For a tracked frame the long-reference cross-attention block is observed.
Each key (a reference cell) owns a correlation vector over the search
queries: a column of the raw map ``M`` or of the refined map ``M + R``.
Columns of keys covered by the target box are normalized over the queries
with a softmax, averaged over heads and those keys, and summed over the
search cells covered by the ground-truth box.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import images
from .data import SyntheticSequence
from .model import TrackerNet, target_cells
from .tracking import Tracker


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def key_column_maps(corr: np.ndarray, residual: np.ndarray | None, key_mask: np.ndarray):
    """Mean query distribution of the masked keys' columns, before and after refinement.

    ``corr`` and ``residual`` are ``(heads, N_q, N_k)``; returns two ``(N_q,)``
    distributions. Without a residual both are equal.
    """
    keys = np.asarray(key_mask, dtype=bool).reshape(-1)
    if not keys.any():
        raise ValueError("the key mask selects no key")

    def columns(m):
        cols = np.swapaxes(m[..., keys], -1, -2)  # (heads, keys, N_q)
        return _softmax(cols).mean(axis=(0, 1))

    pre = columns(corr)
    return pre, (pre if residual is None else columns(corr + residual))


@dataclass
class FrameProbe:
    frame: int
    pre: float  # mass of target-key columns on ground-truth query cells, raw correlation
    post: float  # same with the refined correlation
    pre_map: np.ndarray  # (H, W) distribution over search cells
    post_map: np.ndarray
    patch: np.ndarray  # search crop (R, R, 3)
    gt_patch_box: np.ndarray  # ground truth in normalized crop coordinates
    distractor_in_view: bool

    @property
    def improved(self) -> bool:
        return self.post >= self.pre


def _in_view(boxes: np.ndarray, tf) -> bool:
    for b in boxes:
        p = tf.to_patch(b)
        if p[2] > 0 and p[0] < 1 and p[3] > 0 and p[1] < 1:
            return True
    return False


def probe_sequence(net: TrackerNet, seq: SyntheticSequence, ensemble_size: int | None = None,
                   only_distractor_frames: bool = True) -> list[FrameProbe]:
    """Track ``seq`` and probe the last long-reference block on every frame after the first.

    With ``only_distractor_frames`` a frame is kept only if some distractor
    overlaps its search crop (sequences without distractor boxes keep all).
    Frames whose crop holds no ground-truth cell are skipped.
    """
    tracker = Tracker(net, ensemble_size)
    tracker.observe_decoder = True
    tracker.initialize(seq.frames[0], seq.gt_boxes[0])
    h = w = net.cfg.grid_size
    out = []
    for t in range(1, len(seq)):
        tracker.step(t, seq.frames[t])
        patch, tf = tracker.last_crop
        key_mask = tracker.cache.long_term.embedding_map.mask
        gt = tf.to_patch(seq.gt_boxes[t])
        queries = target_cells(gt, h, w).astype(bool)
        crowded = seq.distractor_boxes is not None and len(seq.distractor_boxes[t]) > 0 \
            and _in_view(seq.distractor_boxes[t], tf)
        if not queries.any() or (only_distractor_frames and seq.distractor_boxes is not None and not crowded):
            continue
        obs = tracker.last_attention
        if not key_mask.any():
            continue
        pre_map, post_map = key_column_maps(obs["corr"][0], None if obs["residual"] is None else obs["residual"][0],
                                          key_mask)
        out.append(FrameProbe(t, float(pre_map[queries].sum()), float(post_map[queries].sum()),
                              pre_map.reshape(h, w), post_map.reshape(h, w), patch, gt, crowded))
    return out


def improved_fraction(probes: list[FrameProbe]) -> float:
    if not probes:
        raise ValueError("no frames were probed")
    return float(np.mean([p.improved for p in probes]))


def _upsample(m: np.ndarray, size: int) -> np.ndarray:
    k = size // m.shape[0]
    return np.kron(m, np.ones((k, k)))


def dump_images(probes: list[FrameProbe], out_dir, scale: int = 4) -> list[Path]:
    """Write crop, before and after maps per probed frame; maps share one colour range per frame."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for p in probes:
        size = p.patch.shape[0] * scale
        crop = images.draw_box(np.kron(p.patch, np.ones((scale, scale, 1))), p.gt_patch_box * size)
        hi = max(p.pre_map.max(), p.post_map.max(), 1e-12)
        for name, img in (("crop", crop), ("before", _upsample(p.pre_map / hi, size)),
                          ("after", _upsample(p.post_map / hi, size))):
            written.append(images.write(out_dir / f"frame{p.frame:04d}_{name}.{'ppm' if img.ndim == 3 else 'pgm'}",
                                        img))
    return written
