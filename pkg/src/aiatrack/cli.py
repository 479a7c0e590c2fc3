"""Command-line entry point: ``python -m aiatrack <command>``."""
from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as runconfig
from . import serialization
from .ablation import VARIANTS, ablate, paired_effect, table, variant_config
from .checks import gradient_suite
from .data import make_dataset, make_sequence
from .metrics import evaluate
from .model import TrackerNet
from .probe import dump_images, improved_fraction, probe_sequence
from .tracking import track_sequence
from .training import load_stem, pretrain_stem, train_toy

WEIGHTS, CONFIG, LOSSES, STEM = "weights.aiat", "config.yaml", "losses.json", "stem.aiat"

# ordering claims checked by ``ablate``: (better, worse, what it shows)
ORDERINGS = [("c", "b", "target/background embeddings beat a plain mask"),
             ("c", "d", "short-term references help"),
             ("i", "c", "inner attention helps"),
             ("i", "conv", "inner attention vs. a convolutional bottleneck")]


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_run_config(path) -> runconfig.RunConfig:
    return runconfig.load(path) if path else runconfig.RunConfig()


def _load_model(model_dir) -> tuple[TrackerNet, runconfig.RunConfig]:
    model_dir = Path(model_dir)
    cfg = runconfig.load(model_dir / CONFIG)
    net = TrackerNet(cfg.model)
    net.load_state_dict(serialization.load(model_dir / WEIGHTS))
    return net, cfg


def _eval_sequence(cfg: runconfig.RunConfig, index: int):
    seeds = np.random.SeedSequence(cfg.eval.eval_seed).generate_state(max(index + 1, cfg.eval.eval_sequences))
    return make_sequence(int(seeds[index]), cfg.data)


def cmd_gradcheck(args) -> int:
    failed = 0
    for r in gradient_suite(args.seed):
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28s} max rel err {r.report.max_rel_err:.2e} "
              f"(tol {r.report.tol:g}, {r.report.checked_entries} entries)")
        failed += not r.passed
    return 1 if failed else 0


def cmd_config(args) -> int:
    text = runconfig.dumps(_load_run_config(args.config))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    model_cfg, _ = variant_config(args.variant, cfg.model)
    optim = cfg.optim if args.steps is None else replace(cfg.optim, steps=args.steps)
    cfg = replace(cfg, model=model_cfg, optim=optim)
    seqs = make_dataset(cfg.eval.train_sequences, cfg.eval.train_seed, cfg.data)
    net = TrackerNet(cfg.model, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if args.stem:
            stem = serialization.load(args.stem)
        else:
            stem = pretrain_stem(cfg.model, cfg.data, cfg.pretrain, cfg.sampling, log_every=args.log_every, log=_log)
            serialization.save(out / STEM, stem)
        load_stem(net, stem)
        res = train_toy(net, seqs, cfg.optim, seed=args.seed, sampling=cfg.sampling, log_every=args.log_every,
                        log=_log)
    serialization.save(out / WEIGHTS, net)
    runconfig.save(out / CONFIG, cfg)
    (out / LOSSES).write_text(json.dumps({"losses": res.losses, "grad_norms": res.grad_norms}))
    print(json.dumps({"model": str(out), "steps": len(res.losses), "final_loss": float(np.mean(res.losses[-50:])),
                      "seconds": round(time.perf_counter() - t0, 1)}))
    return 0


def cmd_track(args) -> int:
    net, cfg = _load_model(args.model)
    seq = _eval_sequence(cfg, args.sequence)
    run = track_sequence(net, seq, ensemble_size=args.ensemble, threshold=args.threshold, seed=args.seed,
                         max_frames=args.frames)
    payload = run.as_dict()
    payload["gt_boxes"] = seq.gt_boxes[:len(run.records)].tolist()
    payload["sequence"] = args.sequence
    text = json.dumps(payload)
    if args.out:
        Path(args.out).write_text(text)
        m = evaluate(run.boxes, payload["gt_boxes"])
        print(json.dumps({"out": args.out, "frames": len(run.records), "encodes": run.encodes,
                          "admitted": run.admitted, "mean_iou": m.mean_iou}))
    else:
        print(text)
    return 0


def cmd_metrics(args) -> int:
    payload = json.loads(Path(args.run).read_text())
    boxes = [r["box"] for r in payload["records"]]
    m = evaluate(boxes, payload["gt_boxes"], args.threshold, args.precision_px)
    print(m.to_json())
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args.config)
    optim = cfg.optim if args.steps is None else replace(cfg.optim, steps=args.steps)
    names = args.variants.split(",")
    train = make_dataset(cfg.eval.train_sequences, cfg.eval.train_seed, cfg.data)
    evals = make_dataset(cfg.eval.eval_sequences, cfg.eval.eval_seed, cfg.data)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        results = ablate(names, train, evals, cfg.model, optim, cfg.sampling, seed=args.seed,
                         threshold=cfg.eval.success_threshold, precision_px=cfg.eval.precision_px, log=_log,
                         stem_state=serialization.load(args.stem) if args.stem else None,
                         pretrain=cfg.pretrain, data_cfg=cfg.data)
    report = {"table": table(results), "orderings": []}
    for better, worse, claim in ORDERINGS:
        if better in results and worse in results:
            eff = paired_effect(results[better], results[worse])
            report["orderings"].append({"better": better, "worse": worse, "claim": claim, **eff})
    for row in report["table"]:
        print(f"{row['variant']:>5s}  mean IoU {row['mean_iou']:.4f}  success {row['success_rate']:.4f}  "
              f"precision {row['precision']:.4f}  trained in {row['train_seconds']:.0f} s")
    for o in report["orderings"]:
        print(f"{o['better']} >= {o['worse']}: diff {o['diff']:+.4f} (se {o['se']:.4f}, wins {o['wins']}/{o['n']}) "
              f"-> {'holds' if o['holds'] else 'reversed'}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return 0


def cmd_dump_corr(args) -> int:
    net, cfg = _load_model(args.model)
    seq = _eval_sequence(cfg, args.sequence)
    probes = probe_sequence(net, seq, args.ensemble)
    if not probes:
        print("no frame with a distractor in view; try another --sequence", file=sys.stderr)
        return 1
    files = dump_images(probes, args.out)
    frac = improved_fraction(probes)
    summary = {"frames": [{"frame": p.frame, "before": p.pre, "after": p.post} for p in probes],
               "improved_fraction": frac, "images": len(files)}
    Path(args.out, "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps({"out": args.out, "probed_frames": len(probes), "improved_fraction": frac}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aiatrack", description="Attention-in-attention tracker at desk scale.")
    p.add_argument("--seed", type=int, default=0, help="initialization and sampling seed")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every module")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("config", help="print the run configuration as commented YAML")
    c.add_argument("--config")
    c.add_argument("--out")
    c.set_defaults(func=cmd_config)

    t = sub.add_parser("train", help="toy-train one variant on synthetic sequences")
    t.add_argument("--config")
    t.add_argument("--variant", default="i", help=f"one of {sorted(VARIANTS)}")
    t.add_argument("--steps", type=int)
    t.add_argument("--stem", help="pretrained stem file; pretrained from scratch when omitted")
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", help="track one evaluation sequence")
    k.add_argument("--model", required=True, help="directory written by train")
    k.add_argument("--sequence", type=int, default=0, help="index into the evaluation set")
    k.add_argument("--ensemble", type=int)
    k.add_argument("--threshold", type=float)
    k.add_argument("--frames", type=int)
    k.add_argument("--out", help="write the run as JSON here")
    k.set_defaults(func=cmd_track)

    m = sub.add_parser("metrics", help="score a run written by track")
    m.add_argument("run")
    m.add_argument("--threshold", type=float, default=0.5)
    m.add_argument("--precision-px", type=float, default=16.0)
    m.set_defaults(func=cmd_metrics)

    a = sub.add_parser("ablate", help="train and compare variants with paired seeds")
    a.add_argument("--config")
    a.add_argument("--variants", default="b,c,d,i,conv", help="comma list; k<N> tracks variant i with N references")
    a.add_argument("--steps", type=int)
    a.add_argument("--stem", help="pretrained stem file shared by all variants")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("dump-corr", help="before/after correlation maps on distractor frames")
    d.add_argument("--model", required=True)
    d.add_argument("--sequence", type=int, default=0)
    d.add_argument("--ensemble", type=int)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_corr)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)
