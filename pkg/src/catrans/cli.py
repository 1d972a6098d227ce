"""Command line: train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 configuration or checkpoint error, 2 numeric
failure during training, 3 gradient check failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import ConfigError, ModelConfig, apply_env
from .gradcheck import model_gradcheck
from .train import AXES, NumericFailure, ablate, ablation_csv, evaluate_checkpoint, train

GRAD_TOL = 1e-4


def _load_config(path) -> ModelConfig:
    return ModelConfig.load(path) if path else apply_env(ModelConfig())


def cmd_train(args) -> int:
    try:
        cfg = _load_config(args.config)
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.variant is not None:
            over["variant"] = args.variant
        cfg = cfg.replace(**over) if over else cfg
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    try:
        manifest, _ = train(cfg, out)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}; diagnostics in {out / 'failure.txt'}", file=sys.stderr)
        return 2
    print(f"trained {cfg.steps} steps ({cfg.variant}, seed {cfg.seed}) in {manifest.wall_clock:.1f}s; "
          f"best val mIoU {manifest.best_val:.4f} at step {manifest.best_step}; wrote {out}")
    return 0


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    try:
        if args.config:
            cfg = ModelConfig.load(args.config)
        else:
            # a run directory stores its config next to the checkpoint
            sibling = path.parent / "config.txt"
            cfg = ModelConfig.load(sibling) if sibling.exists() else apply_env(ModelConfig())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    folds = list(range(4)) if args.fold == "all" else [int(args.fold)]
    seeds = list(cfg.eval_seeds[: args.runs]) if args.runs <= len(cfg.eval_seeds) else list(range(args.runs))
    rows = []
    try:
        for fold in folds:
            res = evaluate_checkpoint(path, cfg, fold, args.k, args.episodes, seeds, force=args.force)
            rows += [(fold, args.k, run, m) for run, m in res.runs]
            print(f"fold {fold} {args.k}-shot: mIoU {res.mean:.4f} +- {res.spread:.4f} over {len(res.runs)} runs")
    except (OSError, ckpt.CheckpointError, KeyError, ValueError) as exc:
        print(f"cannot evaluate {path}: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else path.parent / f"eval_k{args.k}.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "k", "run", "miou"])
        for fold, k, run, m in rows:
            w.writerow([fold, k, run, repr(m)])
    print(f"wrote {out}")
    return 0


def cmd_ablate(args) -> int:
    try:
        cfg = _load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    try:
        rows = ablate(cfg, args.axis, out, progress=print)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    text = ablation_csv(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{args.axis}.csv").write_text(text)
    print(text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    report = model_gradcheck(args.size, seed=args.seed)
    print(report.line())
    if not report.max_error < GRAD_TOL:
        print(f"FAIL: worst offender {report.worst_param}[{report.worst_index}] exceeds {GRAD_TOL:g}")
        return 3
    print(f"ok: all {report.n_params} parameter tensors within {GRAD_TOL:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="catrans", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test-fold mIoU of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="defaults to config.txt beside the checkpoint")
    p.add_argument("--fold", default="0", choices=["0", "1", "2", "3", "all"])
    p.add_argument("--k", type=int, default=1, choices=[1, 5])
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--out", help="CSV path (fold,k,run,miou)")
    p.add_argument("--force", action="store_true", help="accept a config-hash mismatch")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and test one ablation axis")
    p.add_argument("--config")
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--out", default="runs/ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full graph")
    p.add_argument("--size", default="tiny", choices=["tiny", "small"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
