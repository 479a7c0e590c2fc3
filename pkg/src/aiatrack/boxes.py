"""Axis-aligned boxes in ``(x_tl, y_tl, x_br, y_br)`` order."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    @classmethod
    def from_array(cls, arr) -> "BoundingBox":
        a = np.asarray(arr, dtype=np.float64).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_tl, self.y_tl, self.x_br, self.y_br])

    @property
    def width(self) -> float:
        return self.x_br - self.x_tl

    @property
    def height(self) -> float:
        return self.y_br - self.y_tl

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_tl + self.x_br) / 2, (self.y_tl + self.y_br) / 2

    def is_valid(self) -> bool:
        return self.x_tl <= self.x_br and self.y_tl <= self.y_br

    def ordered(self) -> "BoundingBox":
        """Swap coordinates that came out in the wrong order."""
        return BoundingBox(min(self.x_tl, self.x_br), min(self.y_tl, self.y_br),
                           max(self.x_tl, self.x_br), max(self.y_tl, self.y_br))

    def clamp(self, lo: float = 0.0, hi: float = 1.0) -> "BoundingBox":
        b = self.ordered()
        return BoundingBox(*np.clip(b.as_array(), lo, hi).tolist())

    def iou(self, other: "BoundingBox") -> float:
        return float(iou_xyxy(self.as_array(), other.as_array()))


def iou_xyxy(a, b) -> np.ndarray:
    """Elementwise IoU over trailing 4-vectors; zero when the union is empty."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def center_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ca = np.stack([(a[..., 0] + a[..., 2]) / 2, (a[..., 1] + a[..., 3]) / 2], axis=-1)
    cb = np.stack([(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2], axis=-1)
    return np.linalg.norm(ca - cb, axis=-1)
