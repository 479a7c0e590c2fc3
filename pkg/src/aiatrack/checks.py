"""Finite-difference gradient suite over every trainable module.

Block-level checks run at a relative tolerance of 1e-4 and the full tiny
tracker at 1e-3, all in double precision with central differences of 1e-4.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .attention import AttentionConfig, MultiHeadAttention
from .autograd import GradCheckReport, Parameter, Tensor
from .layers import Conv2d, FeedForward, LayerNorm, Linear, Module
from .losses import total_loss
from .model import CornerHead, FeatureMap, IoUHead, Stem, TrackerConfig, TrackerNet

BLOCK_TOL = 1e-4
MODEL_TOL = 1e-3
EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def tiny_tracker_config(**overrides) -> TrackerConfig:
    base = dict(encoder_layers=1, decoder_layers=1, stride=4, search_resolution=16, ffn_hidden=16,
                attention=AttentionConfig(model_dim=8, num_heads=2, inner_dim=4))
    base.update(overrides)
    return TrackerConfig(**base)


def _perturb(module: Module, rng: np.random.Generator, scale: float = 0.3) -> None:
    # zero-initialized weights (the inner output transform) would hide their own gradient paths
    for _, p in module.named_parameters():
        p.assign(p.data + rng.normal(scale=scale, size=p.shape))


def _block(module: Module, forward: Callable[[], Tensor], out_shape, rng, tol=BLOCK_TOL,
           max_entries=None) -> GradCheckReport:
    proj = Tensor(rng.normal(size=out_shape))
    return ag.grad_check(lambda: ag.tsum(forward() * proj), dict(module.named_parameters()), eps=EPS,
                         tol=tol, max_entries=max_entries)


def _block_checks(rng: np.random.Generator):
    x = Tensor(rng.normal(size=(5, 6)))
    lin = Linear(rng, 6, 4)
    yield "linear", _block(lin, lambda: lin(x), (5, 4), rng)
    ln = LayerNorm(6)
    _perturb(ln, rng)
    yield "layer_norm", _block(ln, lambda: ln(x), (5, 6), rng)
    ffn = FeedForward(rng, 6, 10)
    yield "feed_forward", _block(ffn, lambda: ffn(x), (5, 6), rng)
    img = Tensor(rng.normal(size=(2, 4, 4, 3)))
    conv = Conv2d(rng, 3, 5, 3, stride=2, padding=1)
    yield "conv2d", _block(conv, lambda: conv(img), (2, 2, 2, 5), rng)
    stem = Stem(rng, 8, 4)
    _perturb(stem.norm, rng)
    pix = Tensor(rng.uniform(size=(1, 8, 8, 3)))
    yield "stem", _block(stem, lambda: stem(pix).values, (1, 4, 8), rng)

    q, kv = Tensor(rng.normal(size=(9, 8))), Tensor(rng.normal(size=(4, 8)))
    for name, cfg in (("attention", AttentionConfig(8, 2, 4, aia_enabled=False)),
                      ("attention_in_attention", AttentionConfig(8, 2, 4)),
                      ("conv_bottleneck_attention", AttentionConfig(8, 2, 4, refiner="conv"))):
        blk = MultiHeadAttention(rng, cfg, corr_len=9)
        refiner = getattr(blk, "aia", None) or getattr(blk, "conv_refine", None)
        if refiner is not None:
            _perturb(refiner, rng)
        yield name, _block(blk, lambda blk=blk: blk(q, kv, kv, key_grid=(1, 2, 2), query_grid=(1, 3, 3)),
                           (9, 8), rng)

    fmap = FeatureMap(4, 4, Tensor(rng.normal(size=(1, 16, 8))))
    head = CornerHead(rng, 8)
    yield "corner_head", _block(head, lambda: head(fmap).coords, (1, 4), rng)
    iou = IoUHead(rng, 8, 3)
    yield "iou_head", _block(iou, lambda: iou(fmap, [[0.2, 0.1, 0.8, 0.7]]), (1,), rng)

    pred = Parameter(np.array([[0.2, 0.25, 0.6, 0.7], [0.1, 0.1, 0.53, 0.45]]))
    score = Parameter(np.array([0.3, 0.8]))
    gt = Tensor(np.array([[0.25, 0.2, 0.65, 0.75], [0.15, 0.05, 0.5, 0.5]]))
    rep = ag.grad_check(lambda: total_loss(gt, pred, Tensor([0.7, 0.4]), score), {"boxes": pred, "iou": score},
                        eps=EPS, tol=BLOCK_TOL)
    yield "losses", rep


def tiny_model_check(seed: int = 7, max_entries: int = 4) -> GradCheckReport:
    """Tracking loss of a tiny tracker against every parameter group (sampled entries)."""
    net = TrackerNet(tiny_tracker_config(), seed=seed)
    rng = np.random.default_rng(seed)
    for layer in net.decoder.layers + [lay for lay in net.encoder.layers]:
        for blk in (getattr(layer, "attn", None), getattr(layer, "long_attn", None), getattr(layer, "short_attn", None)):
            if blk is not None and getattr(blk, "aia", None) is not None:
                _perturb(blk.aia, rng, 0.2)
    imgs = Tensor(rng.uniform(size=(3, 16, 16, 3)))
    box = np.array([[0.25, 0.3, 0.7, 0.75]])
    prop = np.array([[0.2, 0.25, 0.75, 0.7]])

    def objective():
        v = net.features(imgs).values
        s = FeatureMap(4, 4, v[0:1])
        lt = net.reference(FeatureMap(4, 4, v[1:2]), box)
        st = net.reference(FeatureMap(4, 4, v[2:3]), box)
        corners, iou, _ = net.head_outputs(s, lt, [st], proposals=prop)
        return total_loss(Tensor(box), corners.coords, Tensor([0.6]), iou)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return ag.grad_check(objective, dict(net.named_parameters()), eps=EPS, tol=MODEL_TOL,
                             max_entries=max_entries, seed=seed)


def gradient_suite(seed: int = 0, model_entries: int = 4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [CheckResult(name, rep) for name, rep in _block_checks(rng)]
    results.append(CheckResult("tiny_tracker", tiny_model_check(seed + 7, model_entries)))
    return results
