"""Command line: ``srface {synth,train,eval,sweep-phi,cost}``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigValidationError, ExperimentConfig
from .cost import UnsupportedLayerError, cost_report, count_params
from .data import DataError, degraded_copy, export_dataset, load_dataset, load_detections, synth_dataset
from .detector import (
    INFER,
    TRAIN,
    CheckpointError,
    ConfigError,
    build_model,
    load_checkpoint,
    model_from_checkpoint,
)
from .engine import TrainConfigError, fit, predict
from .experiment import sweep_phi, write_sweep
from .metrics import evaluate_subsets, plot_pr_curves, write_results

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

log = logging.getLogger("srface")


class UsageError(ValueError):
    pass


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(
            train=dataclasses.replace(cfg.train, seed=args.seed),
            synth=dataclasses.replace(cfg.synth, seed=args.seed),
        )
    if getattr(args, "phi", None) is not None:
        cfg = cfg.with_train(phi=args.phi)
    if getattr(args, "no_sr_branch", False):
        cfg = cfg.replace(sr_enabled=False)
    return cfg


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    synth = cfg.synth if args.n is None else dataclasses.replace(cfg.synth, n=args.n)
    samples, small = synth_dataset(synth, return_small=True)
    out = Path(args.out)
    export_dataset(samples, out)
    n_faces = sum(len(s.gt_boxes) for s in samples)
    n_small = int(sum(f.sum() for f in small))
    summary = {"images": len(samples), "faces": n_faces, "small_faces": n_small,
               "small_fraction": n_small / max(n_faces, 1)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    samples = load_dataset(args.data)
    if samples[0].sr_target.shape[0] != cfg.pyramid.input_size:
        raise UsageError(
            f"dataset images are {samples[0].sr_target.shape[0]} px but pyramid.input_size is {cfg.pyramid.input_size}"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    if args.resume:
        result = fit(samples, cfg.train, aug=cfg.augment, out_dir=out, resume=args.resume)
    else:
        model = build_model(cfg.pyramid, cfg.sr if cfg.sr_enabled else None, cfg.train.seed)
        result = fit(samples, cfg.train, model, cfg.augment, out_dir=out)
    summary = {
        "epochs": len(result.records),
        "final_loss": result.records[-1].loss.l_ef if result.records else None,
        "params_infer": count_params(result.model, INFER),
        "params_train": count_params(result.model, TRAIN),
        "best_checkpoint": str(result.best_checkpoint),
    }
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    samples = load_dataset(args.data)
    if cfg.eval.degrade_val and not args.clean:
        samples = degraded_copy(samples, cfg.augment, cfg.eval.val_seed)
    if args.dets_file:
        dets = load_detections(args.dets_file)
        if len(dets) != len(samples):
            raise UsageError(f"{args.dets_file} has {len(dets)} records for {len(samples)} images")
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --dets-file")
        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
        dets = predict(model, [s.input_image for s in samples], cfg.eval.score_thresh, cfg.eval.nms_thresh)
    curves = evaluate_subsets(dets, [s.gt_boxes for s in samples], cfg.eval.bands, cfg.eval.iou_thresh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results(out / "results.jsonl", curves)
    for name, c in curves.items():
        c.to_csv(out / f"pr_{name}.csv")
    plot_pr_curves(out / "pr.png", curves)
    for name, c in curves.items():
        print(f"{name:<7s} AP={c.ap:.4f} n_gt={c.n_gt} n_det={c.n_det}")
    return EXIT_OK


def cmd_sweep_phi(args) -> int:
    cfg = _load_config(args)
    if len(args.values) < 2:
        raise UsageError("--values needs at least two phi values")
    train = load_dataset(args.data) if args.data else None
    val = load_dataset(args.val_data) if args.val_data else None
    if val is not None and cfg.eval.degrade_val:
        val = degraded_copy(val, cfg.augment, cfg.eval.val_seed)
    rows = sweep_phi(cfg, args.values, args.seeds, train, val)
    write_sweep(rows, args.out)
    print(f"{'phi':>6s} {'seed':>4s} {'easy':>7s} {'medium':>7s} {'hard':>7s} status")
    for r in rows:
        aps = " ".join(f"{r.ap.get(k, float('nan')):7.4f}" for k in ("easy", "medium", "hard"))
        print(f"{r.phi:6.3f} {r.seed:4d} {aps} {r.status}")
    return EXIT_OK


def cmd_cost(args) -> int:
    if args.checkpoint:
        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    else:
        cfg = _load_config(args)
        model = build_model(cfg.pyramid, cfg.sr if cfg.sr_enabled else None, cfg.train.seed)
    sizes = args.input_size or [256, 512, 1024]
    stride = 2 ** (model.cfg.levels + 1)
    bad = [s for s in sizes if s % stride]
    if bad:
        raise UsageError(f"input sizes {bad} are not divisible by {stride}")
    reports = [cost_report(model, s, args.runs, args.warmup) for s in sizes]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "cost.jsonl", "w") as fh:
            for r in reports:
                fh.write(json.dumps(r.as_dict()) + "\n")
    print(f"{'size':>6s} {'params':>10s} {'macs_infer':>14s} {'macs_train':>14s} {'branch_macs':>12s} {'fps':>9s} runs")
    for r in reports:
        print(f"{r.input_size:6d} {r.params_infer:10d} {r.macs_infer:14d} {r.macs_train:14d} "
              f"{r.branch_macs:12d} {r.fps:9.2f} {r.runs}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srface", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, phi=False, branch=False):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        if phi:
            p.add_argument("--phi", type=float)
        if branch:
            p.add_argument("--no-sr-branch", action="store_true")

    p = sub.add_parser("synth", help="render a synthetic face dataset")
    common(p)
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    common(p, phi=True, branch=True)
    p.add_argument("--data", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-subset AP and PR curves")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--dets-file")
    p.add_argument("--clean", action="store_true", help="skip the configured input degradation")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-phi", help="AP against the SR loss weight")
    common(p)
    p.add_argument("--values", type=float, nargs="+", default=[0.0, 0.1])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--data")
    p.add_argument("--val-data")
    p.set_defaults(func=cmd_sweep_phi)

    p = sub.add_parser("cost", help="parameters, MACs and FPS")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--checkpoint")
    p.add_argument("--no-sr-branch", action="store_true")
    p.add_argument("--input-size", type=int, action="append")
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=10)
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigValidationError, ConfigError, TrainConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, DataError, CheckpointError, UnsupportedLayerError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
