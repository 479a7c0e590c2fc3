"""Toy training: triplet sampling from synthetic sequences and an AdamW loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError, Parameter, Tensor
from .data import SequenceConfig, SyntheticSequence, crop_patch, jitter_center_scale, make_dataset
from .losses import LossWeights, giou_loss, jitter_boxes, l1_box, total_loss
from .model import CornerHead, FeatureMap, Stem, TrackerConfig, TrackerNet


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimConfig:
    steps: int = 1200
    batch_size: int = 8
    lr: float = 1e-3
    stem_lr_scale: float = 0.1
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_steps: int = 20
    decay_at: float = 0.8  # fraction of steps after which the rate drops 10x
    loss_weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class SamplingConfig:
    max_gap: int = 20  # search index minus short-reference index
    search_center_sigma: float = 0.8
    search_scale_sigma: float = 0.2
    ref_center_sigma: float = 0.1
    ref_scale_sigma: float = 0.05
    proposal_center_sigma: float = 0.1
    proposal_scale_sigma: float = 0.2


@dataclass
class PretrainConfig:
    """Backbone pretraining: the stem learns to box the only object in a crop."""

    steps: int = 1500
    batch_size: int = 8
    lr: float = 1e-3
    sequences: int = 20
    data_seed: int = 7
    seed: int = 99


class AdamW:
    """Adam with decoupled weight decay and per-parameter learning-rate multipliers."""

    def __init__(self, params: list[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, lr_scale: list[float] | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.scale = lr_scale or [1.0] * len(params)
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            lr = self.lr * self.scale[i]
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            decay = self.wd * p.data if p.ndim > 1 else 0.0
            p.data = p.data - lr * (update + decay)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = [g * factor for g in grads]
    return grads, norm


def learning_rate(step: int, opt: OptimConfig) -> float:
    lr = opt.lr
    if opt.warmup_steps and step < opt.warmup_steps:
        lr *= (step + 1) / opt.warmup_steps
    if step >= opt.decay_at * opt.steps:
        lr *= 0.1
    return lr


@dataclass
class Batch:
    search: np.ndarray  # (B, R, R, 3)
    long_ref: np.ndarray
    short_ref: np.ndarray
    search_box: np.ndarray  # (B, 4) normalized, clipped to the patch
    long_box: np.ndarray
    short_box: np.ndarray
    proposals: np.ndarray  # (B, 4)
    proposal_iou: np.ndarray  # (B,)
    frames: np.ndarray  # (B, 3) long, short and search frame indices


def sample_batch(seqs: list[SyntheticSequence], batch_size: int, rng: np.random.Generator,
                 area_factor: float, resolution: int, sampling: SamplingConfig | None = None) -> Batch:
    """Draw (long reference, short reference, search) triplets with the search frame last."""
    sc = sampling or SamplingConfig()
    cols: dict[str, list] = {k: [] for k in Batch.__dataclass_fields__}
    for _ in range(batch_size):
        seq = seqs[int(rng.integers(len(seqs)))]
        n = len(seq)
        if n < 2:
            raise ValueError("training sequences need at least two frames")
        s = int(rng.integers(1, n))
        r = int(rng.integers(max(0, s - sc.max_gap), s))
        l = int(rng.integers(0, r + 1))
        cols["frames"].append((l, r, s))
        for key, idx, csig, ssig in (("long_ref", l, 0.0, 0.0), ("short_ref", r, sc.ref_center_sigma, sc.ref_scale_sigma),
                                      ("search", s, sc.search_center_sigma, sc.search_scale_sigma)):
            box = seq.gt_boxes[idx]
            centre, scale = jitter_center_scale(box, rng, csig, ssig) if csig else (None, 1.0)
            patch, tf, _ = crop_patch(seq.frames[idx], box, area_factor, resolution, centre, scale)
            cols[key].append(patch)
            box_key = {"long_ref": "long_box", "short_ref": "short_box", "search": "search_box"}[key]
            cols[box_key].append(np.clip(tf.to_patch(box), 0.0, 1.0))
        props, ious = jitter_boxes(cols["search_box"][-1], 1, rng, sc.proposal_center_sigma, sc.proposal_scale_sigma)
        cols["proposals"].append(props[0])
        cols["proposal_iou"].append(ious[0])
    return Batch(**{k: np.stack(v) for k, v in cols.items()})


def batch_loss(net: TrackerNet, batch: Batch, weights: LossWeights | None = None) -> Tensor:
    b = batch.search.shape[0]
    imgs = np.concatenate([batch.search, batch.long_ref, batch.short_ref])
    f = net.features(Tensor(imgs))
    v = f.values
    h, w = f.height, f.width
    search = FeatureMap(h, w, v[0:b])
    long_ref = net.reference(FeatureMap(h, w, v[b:2 * b]), batch.long_box)
    short_ref = net.reference(FeatureMap(h, w, v[2 * b:3 * b]), batch.short_box)
    corners, iou, _ = net.head_outputs(search, long_ref, [short_ref], proposals=batch.proposals)
    return total_loss(Tensor(batch.search_box), corners.coords, Tensor(batch.proposal_iou), iou, weights)


@dataclass
class TrainResult:
    net: TrackerNet
    losses: list[float]
    grad_norms: list[float]


def train_toy(net: TrackerNet, seqs: list[SyntheticSequence], opt: OptimConfig | None = None, seed: int = 0,
              sampling: SamplingConfig | None = None, log_every: int = 0, log=print) -> TrainResult:
    """Optimize ``net`` in place; deterministic for a fixed ``seed``."""
    opt = opt or OptimConfig()
    rng = np.random.default_rng(seed)
    named = list(net.named_parameters())
    params = [p for _, p in named]
    scales = [opt.stem_lr_scale if name.startswith("stem.") else 1.0 for name, _ in named]
    optim = AdamW(params, opt.lr, opt.betas, opt.eps, opt.weight_decay, scales)
    cfg = net.cfg
    losses, norms = [], []
    for step in range(opt.steps):
        batch = sample_batch(seqs, opt.batch_size, rng, cfg.crop_area_factor, cfg.search_resolution, sampling)
        try:
            with ag.Tape() as tape:
                loss = batch_loss(net, batch, opt.loss_weights)
            grads = tape.gradient(loss, params)
        except NonFiniteError as exc:
            last = losses[-1] if losses else float("nan")
            raise TrainingDiverged(f"non-finite value at step {step} (previous loss {last:.4g}, "
                                   f"lr {learning_rate(step, opt):.3g}): {exc}") from exc
        grads, norm = clip_by_global_norm(grads, opt.clip_norm)
        if not math.isfinite(norm):
            raise TrainingDiverged(f"non-finite gradient norm at step {step}")
        optim.lr = learning_rate(step, opt)
        optim.step(grads)
        losses.append(loss.item())
        norms.append(norm)
        if log_every and (step + 1) % log_every == 0:
            recent = np.mean(losses[-log_every:])
            log(f"step {step + 1:5d}  loss {recent:.4f}  grad-norm {norm:.3f}")
    return TrainResult(net, losses, norms)


def pretrain_stem(cfg: TrackerConfig, data_cfg: SequenceConfig | None = None, pre: PretrainConfig | None = None,
                  sampling: SamplingConfig | None = None, log_every: int = 0, log=print) -> dict[str, np.ndarray]:
    """Train a stem with a throwaway corner head on distractor-free sequences.

    The sequences come from their own seed, so they never overlap the
    tracking train or evaluation sets. Returns the stem's state dict.
    """
    pre = pre or PretrainConfig()
    base = data_cfg or SequenceConfig()
    seqs = make_dataset(pre.sequences, pre.data_seed, replace(base, distractors=0))
    rng = np.random.default_rng(pre.seed)
    stem = Stem(rng, cfg.model_dim, cfg.stride)
    head = CornerHead(rng, cfg.model_dim)
    params = stem.parameters() + head.parameters()
    optim = AdamW(params, pre.lr)
    running = []
    for step in range(pre.steps):
        b = sample_batch(seqs, pre.batch_size, rng, cfg.crop_area_factor, cfg.search_resolution, sampling)
        truth = Tensor(b.search_box)
        with ag.Tape() as tape:
            coords = head(stem(b.search)).coords
            loss = 2.0 * ag.mean(giou_loss(truth, coords)) + 5.0 * ag.mean(l1_box(truth, coords))
        grads, _ = clip_by_global_norm(tape.gradient(loss, params), 1.0)
        optim.step(grads)
        running.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log(f"pretrain step {step + 1:5d}  loss {np.mean(running[-log_every:]):.4f}")
    return stem.state_dict()


def load_stem(net: TrackerNet, state: dict[str, np.ndarray]) -> None:
    net.stem.load_state_dict(state)
