"""First-third vs final-third training reward per seed, for one or more variants.

    python3 scripts/learning_trend.py --variants ribppo-s,ppo --seeds 0,1,2 --out runs/trend
"""

import argparse
import json

import numpy as np

from riskdrive.cli import _config, _seeds
from riskdrive.experiment import train, variant_by_name


def thirds(rewards):
    k = max(1, len(rewards) // 3)
    return float(np.mean(rewards[:k])), float(np.mean(rewards[-k:]))


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default="reduced")
    ap.add_argument("--variants", default="ribppo-s")
    ap.add_argument("--seeds", type=_seeds, default=[0, 1, 2])
    ap.add_argument("--out", default="runs/trend")
    args = ap.parse_args()
    cfg = _config(args.config)
    summary = {}
    for name in args.variants.split(","):
        for seed in args.seeds:
            res = train(cfg, variant_by_name(name), seed, f"{args.out}/{name}/seed_{seed}")
            first, last = thirds([r["mean_reward"] for r in res.rows])
            summary[f"{name}/{seed}"] = {"first_third": first, "final_third": last, "improved": last > first}
            print(f"{name} seed {seed}: {first:.4f} -> {last:.4f}", flush=True)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
