"""Per-run tracking scores: mean IoU, success rate and centre precision."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .boxes import center_error, iou_xyxy


@dataclass
class RunMetrics:
    mean_iou: float
    success_rate: float
    precision: float
    frames: int
    threshold: float
    precision_px: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def evaluate(pred_boxes, gt_boxes, threshold: float = 0.5, precision_px: float = 16.0,
             skip_first: bool = True) -> RunMetrics:
    """Score predicted boxes against ground truth (both ``(T, 4)`` in frame pixels).

    The first frame is the initialization frame and is skipped by default.
    """
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if pred.shape != gt.shape:
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth frames")
    if skip_first:
        pred, gt = pred[1:], gt[1:]
    if len(pred) == 0:
        raise ValueError("no frames to score")
    ious = iou_xyxy(pred, gt)
    err = center_error(pred, gt)
    return RunMetrics(float(ious.mean()), float((ious > threshold).mean()), float((err < precision_px).mean()),
                      len(pred), threshold, precision_px)


def metrics(run, gt_boxes, threshold: float = 0.5, precision_px: float = 16.0) -> RunMetrics:
    """Scores for a :class:`~aiatrack.tracking.TrackRun`."""
    return evaluate(run.boxes, gt_boxes, threshold, precision_px)


def average(results: list[RunMetrics]) -> dict:
    if not results:
        raise ValueError("nothing to average")
    return {"mean_iou": float(np.mean([r.mean_iou for r in results])),
            "success_rate": float(np.mean([r.success_rate for r in results])),
            "precision": float(np.mean([r.precision for r in results])),
            "sequences": len(results)}
