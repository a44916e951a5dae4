"""Collisions of a uniform-random policy with and without the safety gate.

    python3 scripts/gate_study.py --episodes 500 --seed 0 [--config normal]
"""

import argparse
import json
import time

import numpy as np

from riskdrive import sim
from riskdrive.cli import _config
from riskdrive.experiment import VariantSpec, run_policy_episodes
from riskdrive.sim import Action


def random_chooser(seed: int):
    rng = sim.substream(seed, "random-policy")
    return lambda obs, env: Action(int(rng.integers(len(Action))))


def gate_study(cfg, episodes: int, seed: int) -> dict:
    out = {}
    for gated in (False, True):
        variant = VariantSpec(False, False, False, gated)
        start = time.perf_counter()
        report = run_policy_episodes(cfg, variant, random_chooser(seed), episodes, seed)
        out["gated" if gated else "ungated"] = {
            "collisions": round(report.collision_rate * episodes / 100),
            "mean_speed": report.mean_speed,
            "seconds": time.perf_counter() - start,
        }
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default="normal")
    ap.add_argument("--episodes", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    res = gate_study(_config(args.config), args.episodes, args.seed)
    res["ratio"] = res["gated"]["collisions"] / max(res["ungated"]["collisions"], 1)
    print(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
