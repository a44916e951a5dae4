"""Command line entry point: ``riskdrive <command> ...``.

Commands::

    train    --config cfg.json --variant ribppo-s --seed 0 --out runs/a
    eval     --checkpoint runs/a/checkpoint.npz --episodes 20 --seed 1
    ablate   --config cfg.json --seeds 0,1,2 --out runs/ablation [--variants ppo,ribppo-s]
    riskmap  --scene scene.json --out maps/
    certify  --scene scene.json --lane 2 [--r-safe 1.0] [--out plan.csv]

``--config`` also accepts a preset name (normal, dense, reduced).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import experiment
from .config import PRESETS, ConfigError, load_config, preset


def _config(arg: str):
    if arg in PRESETS and not Path(arg).exists():
        return preset(arg)
    return load_config(arg)


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def cmd_train(args) -> int:
    cfg = _config(args.config)
    variant = experiment.variant_by_name(args.variant)
    try:
        res = experiment.train(cfg, variant, args.seed, args.out, iterations=args.iterations)
    except experiment.TrainingAborted as exc:
        print(f"training aborted: {exc}; last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return 3
    last = res.rows[-1]
    print(f"{len(res.rows)} iterations, final mean reward {last['mean_reward']:.4f}")
    print(f"metrics: {res.metrics_csv}\ncheckpoint: {res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    report = experiment.evaluate(args.checkpoint, args.episodes, args.seed)
    print(json.dumps(asdict(report), indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    variants = args.variants.split(",") if args.variants else None
    path = experiment.ablate(cfg, args.seeds, args.out, variants=variants, eval_episodes=args.episodes)
    print(path)
    return 0


def cmd_riskmap(args) -> int:
    grids = experiment.riskmap(args.scene, args.out)
    for name, g in grids.items():
        print(f"{name}: max {g.values.max():.6g} -> {Path(args.out) / name}.csv/.pgm")
    return 0


def cmd_certify(args) -> int:
    plan = experiment.certify(args.scene, args.lane, r_safe=args.r_safe, sample_count=args.samples)
    if args.out:
        plan.to_csv(args.out)
    else:
        plan.to_csv(sys.stdout)
    verdict = "certified" if plan.certified else "rejected"
    print(f"{verdict}: r_total={plan.r_total:.6g} r_safe={plan.r_safe:.6g}", file=sys.stderr)
    return 0 if plan.certified else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riskdrive", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log every training iteration")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--config", required=True, help="JSON config file or preset name")
    p.add_argument("--variant", default="ribppo-s", choices=sorted(experiment.VARIANTS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None, help="override train.iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every variant per seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=_seeds, required=True, help="e.g. 0,1,2")
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=None, help="comma-separated subset of variants")
    p.add_argument("--episodes", type=int, default=None, help="evaluation episodes per run")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("riskmap", help="rasterize static/dynamic/hybrid fields of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_riskmap)

    p = sub.add_parser("certify", help="certify a lane change in a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--lane", type=int, required=True, help="target lane index")
    p.add_argument("--r-safe", type=float, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--out", default=None, help="plan CSV path (default: stdout)")
    p.set_defaults(func=cmd_certify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, experiment.SceneError, experiment.CompatibilityError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
