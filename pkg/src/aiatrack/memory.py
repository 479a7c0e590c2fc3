"""Long-term / short-term reference memory with IoU-gated admission.

Frame 0 is the permanent long-term reference and also seeds the short-term
cache. A later frame joins the cache only when its predicted IoU is strictly
above the threshold; the oldest cached entry is evicted once the cache grows
past its capacity. Entries keep the encoded features they arrived with, so
nothing is ever re-encoded after admission.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .boxes import BoundingBox


@dataclass(eq=False)
class ReferenceEntry:
    frame_index: int
    features: Any
    embedding_map: Any
    box: BoundingBox


def uniform_indices(n: int, k: int) -> list[int]:
    """Evenly spaced positions into ``n`` entries, ending at the newest.

    Position ``j`` is ``j * (n - 1) / (k - 1)`` rounded half up, so for
    ``n < k`` positions repeat. ``k == 1`` selects only the newest entry.
    """
    if k == 1:
        return [n - 1]
    return [(2 * j * (n - 1) + (k - 1)) // (2 * (k - 1)) for j in range(k)]


def passes_gate(predicted_iou: float, tau: float) -> bool:
    """Admission rule: the predicted IoU must be strictly above ``tau``."""
    return bool(predicted_iou > tau)


@dataclass
class MemoryCache:
    long_term: ReferenceEntry
    capacity: int = 30
    sampling: str = "uniform"
    seed: int = 0
    entries: list[ReferenceEntry] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        if self.sampling not in ("uniform", "random"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        self._rng = np.random.default_rng(self.seed)

    @property
    def frame_indices(self) -> list[int]:
        return [e.frame_index for e in self.entries]

    def maybe_admit(self, entry: ReferenceEntry, predicted_iou: float, tau: float) -> bool:
        newest = self.entries[-1].frame_index if self.entries else self.long_term.frame_index
        if entry.frame_index <= newest:
            raise ValueError(f"frame {entry.frame_index} is not newer than cached frame {newest}")
        admitted = passes_gate(predicted_iou, tau)
        evicted = None
        if admitted:
            self.entries.append(entry)
            if len(self.entries) > self.capacity:
                evicted = self.entries.pop(0).frame_index
        self.log.append({"frame": entry.frame_index, "predicted_iou": float(predicted_iou),
                         "admitted": admitted, "evicted": evicted})
        return admitted

    def sample_ensemble(self, k: int) -> list[ReferenceEntry]:
        if k < 1:
            raise ValueError("ensemble size must be at least 1")
        if not self.entries:
            raise ValueError("memory cache is empty")
        n = len(self.entries)
        if self.sampling == "uniform":
            picks = uniform_indices(n, k)
        else:
            rest = self._rng.choice(n, size=k - 1, replace=n - 1 < k - 1) if k > 1 else []
            picks = sorted(int(i) for i in rest) + [n - 1]
        return [self.entries[i] for i in picks]

    def dump(self) -> dict:
        def box(b: BoundingBox):
            return [b.x_tl, b.y_tl, b.x_br, b.y_br]

        return {
            "capacity": self.capacity,
            "sampling": self.sampling,
            "long_term": {"frame": self.long_term.frame_index, "box": box(self.long_term.box)},
            "entries": [{"frame": e.frame_index, "box": box(e.box)} for e in self.entries],
            "log": list(self.log),
        }

    def dumps(self) -> str:
        return json.dumps(self.dump(), indent=2)


def init(frame0_entry: ReferenceEntry, capacity: int = 30, sampling: str = "uniform", seed: int = 0) -> MemoryCache:
    return MemoryCache(frame0_entry, capacity, sampling, seed, entries=[frame0_entry])


def maybe_admit(cache: MemoryCache, entry: ReferenceEntry, predicted_iou: float, tau: float) -> bool:
    return cache.maybe_admit(entry, predicted_iou, tau)


def sample_ensemble(cache: MemoryCache, k: int) -> list[ReferenceEntry]:
    return cache.sample_ensemble(k)
