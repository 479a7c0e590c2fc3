"""Box and IoU-prediction losses, plus IoU-head training boxes."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .boxes import BoundingBox, iou_xyxy


@dataclass
class LossWeights:
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0
    lambda_mse: float = 1.0

    def __post_init__(self):
        w = (self.lambda_giou, self.lambda_l1, self.lambda_mse)
        if min(w) < 0:
            raise ValueError(f"loss weights must be nonnegative, got {w}")
        if max(w) <= 0:
            raise ValueError("at least one loss weight must be positive")


def _boxes(x) -> Tensor:
    if isinstance(x, BoundingBox):
        return Tensor(x.as_array())
    return ag._as_tensor(x)


def giou(a, b) -> Tensor:
    """Generalized IoU over trailing 4-vectors, differentiable in both boxes.

    A pair with an empty union (both boxes zero-area) gets GIoU 0 and a
    warning; the gradient there is zero.
    """
    a, b = _boxes(a), _boxes(b)
    ax0, ay0, ax1, ay1 = (a[..., i] for i in range(4))
    bx0, by0, bx1, by1 = (b[..., i] for i in range(4))
    iw = ag.relu(ag.minimum(ax1, bx1) - ag.maximum(ax0, bx0))
    ih = ag.relu(ag.minimum(ay1, by1) - ag.maximum(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (ag.maximum(ax1, bx1) - ag.minimum(ax0, bx0)) * (ag.maximum(ay1, by1) - ag.minimum(ay0, by0))
    empty = union.data <= 0
    if empty.any():
        warnings.warn("GIoU of boxes with an empty union is defined as 0", RuntimeWarning, stacklevel=2)
    valid = Tensor((~empty).astype(np.float64))
    safe_union = union + Tensor(empty.astype(np.float64))
    safe_hull = hull + Tensor((hull.data <= 0).astype(np.float64))
    return (inter / safe_union - (hull - union) / safe_hull) * valid


def giou_loss(a, b) -> Tensor:
    return 1.0 - giou(a, b)


def l1_box(a, b) -> Tensor:
    """Sum of absolute coordinate differences over the trailing axis."""
    a, b = _boxes(a), _boxes(b)
    return ag.tsum(ag.absolute(a - b), axis=-1)


def total_loss(box_true, box_pred, iou_true, iou_pred, weights: LossWeights | None = None) -> Tensor:
    """Weighted GIoU + L1 + squared IoU error, averaged over leading axes."""
    weights = weights or LossWeights()
    iou_true, iou_pred = ag._as_tensor(iou_true), ag._as_tensor(iou_pred)
    if np.any(iou_true.data < 0) or np.any(iou_true.data > 1):
        raise ValueError("target IoU must lie in [0, 1]")
    g = ag.mean(giou_loss(box_true, box_pred))
    l1 = ag.mean(l1_box(box_true, box_pred))
    err = iou_true - iou_pred
    mse = ag.mean(err * err)
    return weights.lambda_giou * g + weights.lambda_l1 * l1 + weights.lambda_mse * mse


def jitter_boxes(gt: np.ndarray, n: int, rng: np.random.Generator, sigma_center: float = 0.1,
                 sigma_scale: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian jitter of center and log-size, clipped to the unit square.

    ``gt`` has shape ``(..., 4)``; returns boxes ``(..., n, 4)`` and their
    IoU with ``gt`` of shape ``(..., n)``. Corners are moved by offsets so a
    zero jitter returns ``gt`` bit-for-bit.
    """
    gt = np.asarray(gt, dtype=np.float64)
    base = np.repeat(gt[..., None, :], n, axis=-2)
    w = base[..., 2] - base[..., 0]
    h = base[..., 3] - base[..., 1]
    shape = base.shape[:-1]
    dx = sigma_center * w * rng.standard_normal(shape)
    dy = sigma_center * h * rng.standard_normal(shape)
    dw = w * (np.exp(sigma_scale * rng.standard_normal(shape)) - 1.0)
    dh = h * (np.exp(sigma_scale * rng.standard_normal(shape)) - 1.0)
    out = np.stack([base[..., 0] + dx - dw / 2, base[..., 1] + dy - dh / 2,
                    base[..., 2] + dx + dw / 2, base[..., 3] + dy + dh / 2], axis=-1)
    out = np.clip(out, 0.0, 1.0)
    return out, iou_xyxy(out, base)


def sample_jittered_boxes(gt: BoundingBox, n: int, rng_seed: int, sigma_center: float = 0.1,
                          sigma_scale: float = 0.2) -> list[tuple[BoundingBox, float]]:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(rng_seed)
    boxes, ious = jitter_boxes(gt.as_array(), n, rng, sigma_center, sigma_scale)
    return [(BoundingBox.from_array(b), float(i)) for b, i in zip(boxes, ious)]
