"""Online tracking loop with a gated reference memory."""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import memory
from .boxes import BoundingBox
from .data import SyntheticSequence, crop_patch
from .memory import ReferenceEntry
from .model import Reference, TrackerNet


@dataclass
class FrameRecord:
    frame: int
    box: list[float]  # frame pixels
    predicted_iou: float | None
    admitted: bool
    seconds: float


@dataclass
class TrackRun:
    records: list[FrameRecord] = field(default_factory=list)
    encodes: dict[str, int] = field(default_factory=lambda: {"reference": 0, "search": 0})
    memory_log: list[dict] = field(default_factory=list)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([r.box for r in self.records])

    @property
    def admitted(self) -> int:
        return sum(1 for r in self.records[1:] if r.admitted)

    def as_dict(self) -> dict:
        return {"records": [vars(r) for r in self.records], "encodes": dict(self.encodes),
                "memory_log": list(self.memory_log)}


class Tracker:
    """Single-sequence tracker state around a shared, read-only network."""

    def __init__(self, net: TrackerNet, ensemble_size: int | None = None, threshold: float | None = None,
                 capacity: int | None = None, sampling: str = "uniform", seed: int = 0):
        cfg = net.cfg
        self.net = net
        self.ensemble_size = cfg.ensemble_size if ensemble_size is None else ensemble_size
        self.threshold = cfg.update_threshold if threshold is None else threshold
        self.capacity = cfg.cache_capacity if capacity is None else capacity
        self.sampling = sampling
        self.seed = seed
        self.encodes = {"reference": 0, "search": 0}
        self.cache: memory.MemoryCache | None = None
        self.box: np.ndarray | None = None
        self.observe_decoder = False
        self.last_attention: dict | None = None
        self.last_crop = None

    def _crop(self, frame, box):
        cfg = self.net.cfg
        return crop_patch(frame, box, cfg.crop_area_factor, cfg.search_resolution)

    def _reference(self, frame_index: int, frame, box) -> ReferenceEntry:
        patch, tf, _ = self._crop(frame, box)
        feats = self.net.features(patch)
        self.encodes["reference"] += 1
        ref = self.net.reference(feats, tf.to_patch(box))
        return ReferenceEntry(frame_index, ref.features, ref.embedding, BoundingBox.from_array(box))

    def initialize(self, frame: np.ndarray, box) -> None:
        self.box = np.asarray(box, dtype=np.float64)
        entry = self._reference(0, frame, self.box)
        self.cache = memory.init(entry, self.capacity, self.sampling, self.seed)

    def step(self, frame_index: int, frame: np.ndarray) -> tuple[np.ndarray, float, bool]:
        if self.cache is None:
            raise RuntimeError("tracker is not initialized")
        patch, tf, _ = self._crop(frame, self.box)
        self.last_crop = (patch, tf)
        search = self.net.features(patch)
        self.encodes["search"] += 1
        refs = [Reference(e.features, e.embedding_map) for e in self.cache.sample_ensemble(self.ensemble_size)]
        lt = self.cache.long_term
        long_ref = Reference(lt.features, lt.embedding_map)
        blocks = [layer.long_attn for layer in self.net.decoder.layers]
        for b in blocks:
            b.observe(self.observe_decoder)
        corners, _, decoded = self.net.head_outputs(search, long_ref, refs)
        if self.observe_decoder:
            self.last_attention = dict(blocks[-1].last)
        norm_box = corners.box().as_array()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            score = float(self.net.iou_head(decoded, norm_box).data[0])
        h, w = frame.shape[:2]
        frame_box = np.clip(tf.to_frame(norm_box), 0.0, [w, h, w, h])
        # keep a usable search centre even if the prediction collapses
        if frame_box[2] - frame_box[0] < 1.0 or frame_box[3] - frame_box[1] < 1.0:
            frame_box = self._keep_size(frame_box, w, h)
        self.box = frame_box
        if memory.passes_gate(score, self.threshold):
            entry = self._reference(frame_index, frame, frame_box)
        else:
            entry = ReferenceEntry(frame_index, None, None, BoundingBox.from_array(frame_box))
        admitted = self.cache.maybe_admit(entry, score, self.threshold)
        return frame_box, score, admitted

    def _keep_size(self, box, w, h):
        prev = self.box
        cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
        pw, ph = prev[2] - prev[0], prev[3] - prev[1]
        return np.clip([cx - pw / 2, cy - ph / 2, cx + pw / 2, cy + ph / 2], 0.0, [w, h, w, h])


def track_sequence(net: TrackerNet, seq: SyntheticSequence, ensemble_size: int | None = None,
                   threshold: float | None = None, sampling: str = "uniform", seed: int = 0,
                   max_frames: int | None = None) -> TrackRun:
    """Track ``seq`` from its frame-0 ground truth; returns one record per frame."""
    if len(seq) < 1:
        raise ValueError("sequence has no frames")
    tracker = Tracker(net, ensemble_size, threshold, sampling=sampling, seed=seed)
    run = TrackRun()
    n = len(seq) if max_frames is None else min(len(seq), max_frames)
    t0 = time.perf_counter()
    tracker.initialize(seq.frames[0], seq.gt_boxes[0])
    run.records.append(FrameRecord(0, seq.gt_boxes[0].tolist(), None, True, time.perf_counter() - t0))
    for t in range(1, n):
        t0 = time.perf_counter()
        box, score, admitted = tracker.step(t, seq.frames[t])
        run.records.append(FrameRecord(t, box.tolist(), score, admitted, time.perf_counter() - t0))
    run.encodes = dict(tracker.encodes)
    run.memory_log = list(tracker.cache.log)
    return run
