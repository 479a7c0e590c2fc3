"""Pretrain a stem, train the tracker briefly, then track one unseen sequence.

Default step counts finish in a few minutes on one core; pass larger
numbers for a model that tracks well (the acceptance suite trains 1200 steps).
"""
import argparse
import warnings
from dataclasses import replace

import numpy as np

from aiatrack.config import RunConfig
from aiatrack.data import make_dataset
from aiatrack.metrics import evaluate
from aiatrack.model import TrackerNet
from aiatrack.tracking import track_sequence
from aiatrack.training import load_stem, pretrain_stem, train_toy

parser = argparse.ArgumentParser()
parser.add_argument("--pretrain-steps", type=int, default=300)
parser.add_argument("--steps", type=int, default=200)
args = parser.parse_args()

warnings.simplefilter("ignore", RuntimeWarning)
cfg = RunConfig()
train = make_dataset(cfg.eval.train_sequences, cfg.eval.train_seed, cfg.data)
held_out = make_dataset(1, cfg.eval.eval_seed, cfg.data)[0]

stem = pretrain_stem(cfg.model, cfg.data, replace(cfg.pretrain, steps=args.pretrain_steps), cfg.sampling,
                     log_every=100)
net = TrackerNet(cfg.model, seed=0)
load_stem(net, stem)
res = train_toy(net, train, replace(cfg.optim, steps=args.steps), sampling=cfg.sampling, log_every=50)
print(f"loss {np.mean(res.losses[:10]):.3f} -> {np.mean(res.losses[-10:]):.3f}")

run = track_sequence(net, held_out)
m = evaluate(run.boxes, held_out.gt_boxes)
print(f"{len(run.records)} frames, {run.admitted} references admitted, encodes {run.encodes}")
print(f"mean IoU {m.mean_iou:.3f}, success {m.success_rate:.3f}, precision {m.precision:.3f}")
