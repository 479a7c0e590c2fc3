"""Ablation variants, shared-seed training and paired evaluation."""
from __future__ import annotations

import dataclasses
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import SyntheticSequence, make_dataset
from .metrics import RunMetrics, metrics
from .model import TrackerConfig, TrackerNet
from .tracking import track_sequence
from .training import OptimConfig, PretrainConfig, SamplingConfig, load_stem, pretrain_stem, train_toy

WORKERS_ENV = "AIATRACK_WORKERS"

# Each variant is a set of overrides on the final configuration "i".
_NO_AIA = {"aia_placement": "none"}
VARIANTS: dict[str, dict] = {
    "a": {"embeddings": "none", **_NO_AIA},
    "b": {"embeddings": "mask", **_NO_AIA},
    "c": {"embeddings": "embed", **_NO_AIA},
    "d": {"embeddings": "embed", "branches": "long_only", **_NO_AIA},
    "e": {"embeddings": "embed", "branches": "merged", **_NO_AIA},
    "f": {"aia_placement": "self"},
    "g": {"aia_placement": "cross"},
    "h": {"attention.aia_positional": False},
    "i": {},
    "conv": {"attention.refiner": "conv"},
}
ENSEMBLE_PREFIX = "k"  # "k1" .. "k6": variant i tracked with that many short-term references


def _flatten(cfg: TrackerConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out.update({f"{f.name}.{k}": x for k, x in dataclasses.asdict(v).items()})
        else:
            out[f.name] = v
    return out


def variant_config(name: str, base: TrackerConfig | None = None) -> tuple[TrackerConfig, int | None]:
    """Network config for a variant and the ensemble size it tracks with (None = config default)."""
    base = base or TrackerConfig()
    ensemble = None
    if name.startswith(ENSEMBLE_PREFIX) and name[1:].isdigit():
        ensemble = int(name[1:])
        if ensemble < 1:
            raise ValueError(f"ensemble size must be positive in {name!r}")
        name = "i"
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)} or k<N>")
    top, attn = {}, {}
    for key, value in VARIANTS[name].items():
        if key.startswith("attention."):
            attn[key.split(".", 1)[1]] = value
        else:
            top[key] = value
    cfg = replace(base, attention=replace(base.attention, **attn), **top)
    return cfg, ensemble


def config_diff(a: TrackerConfig, b: TrackerConfig) -> set[str]:
    fa, fb = _flatten(a), _flatten(b)
    return {k for k in fa if fa[k] != fb[k]}


@dataclass
class VariantResult:
    name: str
    per_sequence: list[RunMetrics]
    losses: list[float]
    train_seconds: float = 0.0

    @property
    def mean_iou(self) -> float:
        return float(np.mean([m.mean_iou for m in self.per_sequence]))

    @property
    def success_rate(self) -> float:
        return float(np.mean([m.success_rate for m in self.per_sequence]))

    @property
    def precision(self) -> float:
        return float(np.mean([m.precision for m in self.per_sequence]))

    def ious(self) -> np.ndarray:
        return np.array([m.mean_iou for m in self.per_sequence])


def paired_effect(better: VariantResult, worse: VariantResult) -> dict:
    """Mean paired IoU difference, its standard error and a paired t statistic."""
    d = better.ious() - worse.ious()
    n = len(d)
    se = float(d.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return {"diff": float(d.mean()), "se": se, "t": float(d.mean() / se) if se and se > 0 else float("nan"),
            "wins": int((d > 0).sum()), "n": n, "holds": bool(d.mean() >= 0)}


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return default
    n = int(raw)
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer")
    return n


def _track_one(args) -> RunMetrics:
    cfg, state, seq, ensemble, threshold, px = args
    net = TrackerNet(cfg)
    net.load_state_dict(state)
    run = track_sequence(net, seq, ensemble_size=ensemble)
    return metrics(run, seq.gt_boxes, threshold, px)


def evaluate_net(net: TrackerNet, seqs: list[SyntheticSequence], ensemble: int | None = None,
                 threshold: float = 0.5, precision_px: float = 16.0, workers: int | None = None) -> list[RunMetrics]:
    """Track every sequence with independent tracker state; optionally in a process pool."""
    workers = worker_count() if workers is None else workers
    if workers <= 1:
        return [metrics(track_sequence(net, s, ensemble_size=ensemble), s.gt_boxes, threshold, precision_px)
                for s in seqs]
    state = net.state_dict()
    jobs = [(net.cfg, state, s, ensemble, threshold, precision_px) for s in seqs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_track_one, jobs))


def ablate(names: list[str], train_seqs: list[SyntheticSequence], eval_seqs: list[SyntheticSequence],
           base: TrackerConfig | None = None, opt: OptimConfig | None = None, sampling: SamplingConfig | None = None,
           seed: int = 0, threshold: float = 0.5, precision_px: float = 16.0, log=None,
           cache: dict | None = None, stem_state: dict | None = None, pretrain: PretrainConfig | None = None,
           data_cfg=None) -> dict[str, VariantResult]:
    """Train each distinct network once (same init seed, data and sampling seed) and evaluate it.

    Every variant starts from the same pretrained stem: ``stem_state`` if
    given, else one pretrained here with ``pretrain``. ``cache`` maps
    network-config keys to trained ``(net, losses, seconds)`` and is filled in,
    so ensemble-size variants reuse the trained variant ``i``.
    """
    cache = {} if cache is None else cache
    results = {}
    base = base or TrackerConfig()
    if stem_state is None and any(repr(variant_config(n, base)[0]) not in cache for n in names):
        if log:
            log("pretraining the shared stem")
        stem_state = pretrain_stem(base, data_cfg, pretrain, sampling)
    for name in names:
        cfg, ensemble = variant_config(name, base)
        key = repr(cfg)
        if key not in cache:
            if log:
                log(f"training variant {name}")
            net = TrackerNet(cfg, seed=seed)
            load_stem(net, stem_state)
            t0 = time.perf_counter()
            res = train_toy(net, train_seqs, opt, seed=seed, sampling=sampling)
            cache[key] = (net, res.losses, time.perf_counter() - t0)
        net, losses, seconds = cache[key]
        per_seq = evaluate_net(net, eval_seqs, ensemble, threshold, precision_px)
        results[name] = VariantResult(name, per_seq, losses, seconds)
        if log:
            log(f"variant {name}: mean IoU {results[name].mean_iou:.4f}")
    return results


def table(results: dict[str, VariantResult]) -> list[dict]:
    return [{"variant": n, "mean_iou": r.mean_iou, "success_rate": r.success_rate, "precision": r.precision,
             "sequences": len(r.per_sequence), "train_seconds": round(r.train_seconds, 1)} for n, r in results.items()]


def default_datasets(train_count: int, eval_count: int, train_seed: int, eval_seed: int, data_cfg=None):
    return make_dataset(train_count, train_seed, data_cfg), make_dataset(eval_count, eval_seed, data_cfg)
