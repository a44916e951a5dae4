"""Training, evaluation, ablation and export drivers behind the CLI."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import sim
from .config import ConfigError, ExperimentConfig, build, config_from_dict
from .env import DrivingEnv
from .nn import Adam
from .ppo import ActorCritic, NonFiniteLossError, RolloutWorker, compute_gae, ppo_update
from .reward import reward_terms
from .risk import GridSpec, RiskGrid, RiskParams, field_grids, write_raster_sidecar
from .safety import LaneChangePlan, evaluate_lane_change
from .sim import Action, ScenarioConfig, VehicleState

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

METRICS_COLUMNS = [
    "iteration", "mean_reward", "mean_stored_reward", "mean_speed", "episodes", "collision_count",
    "overrides", "mean_r_s", "mean_r_st", "mean_r_e", "mean_r_a",
    "mean_ratio", "clip_fraction", "value_loss", "policy_objective", "entropy",
]
ABLATION_METRICS = ["mean_reward", "mean_speed", "speed_variance", "collision_rate", "final_train_reward"]


class CompatibilityError(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class VariantSpec:
    risk_attention: bool
    image_attention_net: bool
    balanced_reward: bool
    safety_filter: bool

    @property
    def name(self) -> str:
        for k, v in VARIANTS.items():
            if v == self:
                return k
        flags = "".join(c for c, on in zip("RIBS", asdict(self).values()) if on)
        return f"custom-{flags or 'none'}"


VARIANTS = {
    "ribppo-s": VariantSpec(True, True, True, True),
    "ppo": VariantSpec(False, False, False, False),
    "bppo": VariantSpec(False, False, True, False),
    "rppo": VariantSpec(True, False, False, False),
    "ppo-s": VariantSpec(False, False, False, True),
}


def variant_by_name(name: str) -> VariantSpec:
    try:
        return VARIANTS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass
class EvalReport:
    episodes: int
    mean_reward: float
    mean_speed: float
    speed_variance: float
    collision_rate: float
    wall_time: float = 0.0


def summarize(returns, speeds, collisions: int, wall_time: float = 0.0) -> EvalReport:
    """Aggregate per-episode returns and per-step speeds; collisions per 100 episodes."""
    n = len(returns)
    if n < 1:
        raise ValueError("need at least one episode")
    speeds = np.asarray(speeds, dtype=float)
    return EvalReport(
        episodes=n,
        mean_reward=float(np.mean(returns)),
        mean_speed=float(speeds.mean()),
        speed_variance=float(speeds.var()),
        collision_rate=100.0 * collisions / n,
        wall_time=wall_time,
    )


# ---------------------------------------------------------------- construction


def make_env(cfg: ExperimentConfig, variant: VariantSpec, seed: int) -> DrivingEnv:
    return DrivingEnv(
        cfg.scenario, cfg.risk, cfg.grid, cfg.safety_config(),
        risk_observation=variant.risk_attention, safety_filter=variant.safety_filter, seed=seed,
    )


def make_agent(cfg: ExperimentConfig, variant: VariantSpec, seed: int) -> ActorCritic:
    return ActorCritic(
        cfg.network_config(attention=variant.image_attention_net),
        sim.substream(seed, "init"),
        critic_uses_policy=cfg.network.critic_uses_policy,
    )


def make_optimizers(agent: ActorCritic, cfg: ExperimentConfig) -> tuple[Adam, Adam]:
    p = cfg.ppo
    return (Adam(agent.actor.params, lr=p.learning_rate, max_grad_norm=p.max_grad_norm),
            Adam(agent.critic.params, lr=p.learning_rate, max_grad_norm=p.max_grad_norm))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, cfg: ExperimentConfig, variant: VariantSpec, seed: int, iteration: int,
                    agent: ActorCritic, optimizers: tuple[Adam, Adam], rngs: dict[str, np.random.Generator]):
    arrays = {f"actor.{k}": v for k, v in agent.actor.params.items()}
    arrays.update({f"critic.{k}": v for k, v in agent.critic.params.items()})
    arrays.update(optimizers[0].state_arrays("opt_actor"))
    arrays.update(optimizers[1].state_arrays("opt_critic"))
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "variant": asdict(variant),
        "seed": seed,
        "iteration": iteration,
        "adam_t": [optimizers[0].t, optimizers[1].t],
        "rng_state": {k: g.bit_generator.state for k, g in rngs.items()},
    }
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    config: ExperimentConfig
    variant: VariantSpec
    seed: int
    iteration: int
    agent: ActorCritic
    optimizers: tuple[Adam, Adam]
    rng_state: dict
    meta: dict


def load_checkpoint(path, expected_config: ExperimentConfig | None = None) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(str(arrays.pop("__meta__")))
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"unsupported checkpoint format {meta.get('format_version')}")
    cfg = config_from_dict(meta["config"])
    if cfg.hash() != meta["config_hash"]:
        raise CompatibilityError("checkpoint config does not match its recorded hash")
    if expected_config is not None and expected_config.hash() != meta["config_hash"]:
        raise CompatibilityError("checkpoint was trained with a different configuration")
    variant = VariantSpec(**meta["variant"])
    agent = make_agent(cfg, variant, meta["seed"])
    for net, prefix in ((agent.actor, "actor."), (agent.critic, "critic.")):
        for k in net.params:
            stored = arrays[prefix + k]
            if stored.shape != net.params[k].shape:
                raise CompatibilityError(f"parameter {prefix + k} has shape {stored.shape}")
            net.params[k] = stored.copy()
    opts = make_optimizers(agent, cfg)
    opts[0].load_state_arrays("opt_actor", arrays, meta["adam_t"][0])
    opts[1].load_state_arrays("opt_critic", arrays, meta["adam_t"][1])
    return Checkpoint(cfg, variant, meta["seed"], meta["iteration"], agent, opts, meta["rng_state"], meta)


# ---------------------------------------------------------------- train


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_csv: Path
    rows: list[dict]


def train(cfg: ExperimentConfig, variant: VariantSpec, seed: int, out_dir, iterations: int | None = None) -> TrainResult:
    """Collect -> GAE -> PPO update, one metrics row per iteration."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    iterations = cfg.train.iterations if iterations is None else iterations
    env_seed = int(sim.substream(seed, "env").integers(2**63))
    env = make_env(cfg, variant, env_seed)
    agent = make_agent(cfg, variant, seed)
    opts = make_optimizers(agent, cfg)
    rngs = {"policy": sim.substream(seed, "policy"), "shuffle": sim.substream(seed, "shuffle")}
    worker = RolloutWorker(env, agent, cfg.reward_config(), balanced=variant.balanced_reward, rng=rngs["policy"])

    metrics_path = out / "metrics.csv"
    ckpt_path = out / "checkpoint.npz"
    last_good: Path | None = None
    rows = []
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for it in range(1, iterations + 1):
            buf = compute_gae(worker.collect(cfg.ppo.rollout_horizon), cfg.ppo).finalize()
            try:
                stats = ppo_update(buf, agent, opts, cfg.ppo, rngs["shuffle"])
            except NonFiniteLossError as exc:
                log.error("iteration %d: %s %s", it, exc, exc.diagnostics)
                raise TrainingAborted(f"non-finite training signal at iteration {it}", last_good) from exc
            info = buf.info
            row = {
                "iteration": it,
                "mean_reward": float(buf.raw_rewards.mean()),
                "mean_stored_reward": float(buf.rewards.mean()),
                "mean_speed": info["mean_speed"],
                "episodes": info["episodes"],
                "collision_count": info["collisions"],
                "overrides": info["overrides"],
                **{f"mean_{k}": info.get(f"mean_{k}", 0.0) for k in ("r_s", "r_st", "r_e", "r_a")},
                **{k: stats[k] for k in ("mean_ratio", "clip_fraction", "value_loss", "policy_objective", "entropy")},
            }
            rows.append(row)
            writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
            fh.flush()
            log.info("iter %d reward %.4f speed %.2f collisions %d", it, row["mean_reward"], row["mean_speed"],
                     row["collision_count"])
            if it % cfg.train.checkpoint_every == 0 or it == iterations:
                last_good = save_checkpoint(ckpt_path, cfg, variant, seed, it, agent, opts, rngs)
    counters = dict(env.counters) | dict(worker.counters)
    (out / "counters.json").write_text(json.dumps(counters, sort_keys=True) + "\n")
    return TrainResult(ckpt_path, metrics_path, rows)


# ---------------------------------------------------------------- evaluate


def run_policy_episodes(cfg: ExperimentConfig, variant: VariantSpec, choose, episodes: int, seed: int,
                        on_step=None) -> EvalReport:
    """Roll out ``choose(obs, env) -> Action`` for whole episodes with fixed seeds."""
    start = time.perf_counter()
    env = make_env(cfg, variant, seed)
    seeds = sim.substream(seed, "eval").integers(2**63, size=episodes)
    rc = cfg.reward_config()
    returns, speeds, collisions = [], [], 0
    for ep_seed in seeds:
        obs = env.reset(int(ep_seed))
        total, done = 0.0, False
        while not done:
            obs, outcome, _, _ = env.step(choose(obs, env))
            t = reward_terms(outcome.collided, outcome.lane_changed, outcome.av_speed, rc)
            total += t["r_s"] + t["r_st"] + t["r_e"] + t["r_a"]
            speeds.append(outcome.av_speed)
            done = outcome.done
            collisions += outcome.collided
            if on_step is not None:
                on_step(outcome)
        returns.append(total)
    return summarize(returns, speeds, collisions, time.perf_counter() - start)


def greedy_chooser(agent: ActorCritic):
    state = {"h": agent.actor.initial_state()}

    def choose(obs, env):
        if env.world.step_count == 0:
            state["h"] = agent.actor.initial_state()
        logits, state["h"] = agent.actor.forward(obs[None, None], state["h"])
        return Action(int(np.argmax(logits[0, 0])))

    return choose


def evaluate_agent(cfg: ExperimentConfig, variant: VariantSpec, agent: ActorCritic, episodes: int, seed: int) -> EvalReport:
    return run_policy_episodes(cfg, variant, greedy_chooser(agent), episodes, seed)


def evaluate(checkpoint, episodes: int, seed: int, expected_config: ExperimentConfig | None = None) -> EvalReport:
    ck = load_checkpoint(checkpoint, expected_config)
    return evaluate_agent(ck.config, ck.variant, ck.agent, episodes, seed)


# ---------------------------------------------------------------- ablate


def ablate(cfg: ExperimentConfig, seeds, out_dir, variants=None, eval_episodes: int | None = None) -> Path:
    """Train and evaluate each variant per seed; long-format (variant, seed, metric, value) CSV."""
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    names = list(VARIANTS) if variants is None else [v.lower() for v in variants]
    for n in names:
        variant_by_name(n)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    episodes = cfg.train.eval_episodes if eval_episodes is None else eval_episodes
    rows = []
    for name in names:
        variant = VARIANTS[name]
        for seed in seeds:
            res = train(cfg, variant, seed, out / name / f"seed_{seed}")
            report = evaluate(res.checkpoint, episodes, seed)
            third = max(1, len(res.rows) // 3)
            final = float(np.mean([r["mean_reward"] for r in res.rows[-third:]]))
            values = {**asdict(report), "final_train_reward": final}
            rows += [(name, seed, m, values[m]) for m in ABLATION_METRICS]
    path = out / "ablation.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "metric", "value"])
        for name, seed, metric, value in rows:
            w.writerow([name, seed, metric, _fmt(value)])
    return path


# ---------------------------------------------------------------- scenes


@dataclass
class Scene:
    scenario: ScenarioConfig
    risk: RiskParams
    world: sim.World
    grid: GridSpec | None
    r_safe: float | None


def load_scene(path) -> Scene:
    """Scene file: {"vehicles": [VehicleState...], "risk_params": {...}, "scenario": {...}, "grid": {...}}."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if isinstance(data, list):
        data = {"vehicles": data}
    if not isinstance(data, dict) or "vehicles" not in data:
        raise SceneError(f"{path}: expected an object with a 'vehicles' list")
    allowed = {"vehicles", "risk_params", "scenario", "grid", "r_safe"}
    for key in data:
        if key not in allowed:
            raise SceneError(f"{path}: {key}: unknown field")
    try:
        scenario = build(ScenarioConfig, data.get("scenario", {}), "scenario")
        risk = build(RiskParams, data.get("risk_params", {}), "risk_params")
        grid = build(GridSpec, data["grid"], "grid") if "grid" in data else None
        vehicles = []
        for i, rec in enumerate(data["vehicles"]):
            if isinstance(rec, dict) and "y" not in rec and "lane" in rec:
                rec = {**rec, "y": scenario.lane_center(rec["lane"])}
            vehicles.append(build(VehicleState, rec, f"vehicles[{i}]"))
        world = sim.make_world(scenario, vehicles)
    except (ConfigError, ValueError) as exc:
        raise SceneError(f"{path}: {exc}") from None
    return Scene(scenario, risk, world, grid, data.get("r_safe"))


def default_riskmap_grid(world: sim.World) -> GridSpec:
    cfg = world.config
    cell = 0.5
    return GridSpec(width_cells=200, height_cells=int(round(cfg.lane_count * cfg.lane_width / cell)),
                    cell_size=cell, origin=(-20.0, -world.av.y))


def riskmap(scene_path, out_dir) -> dict[str, RiskGrid]:
    """Static, dynamic and hybrid rasters of a scene as CSV + PGM, plus a scale sidecar."""
    scene = load_scene(scene_path)
    spec = scene.grid or default_riskmap_grid(scene.world)
    static, dynamic = field_grids(scene.world, scene.risk, spec, hdvs=scene.world.hdvs)
    p = scene.risk
    grids = {
        "static": RiskGrid(static, spec),
        "dynamic": RiskGrid(dynamic, spec),
        "hybrid": RiskGrid(p.w_s * static + p.w_d * dynamic, spec),
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scales = {}
    for name, g in grids.items():
        g.to_csv(out / f"{name}.csv")
        scales[name] = g.to_pgm(out / f"{name}.pgm")
    write_raster_sidecar(out / "rasters.txt", scales, spec)
    return grids


def certify(scene_path, target_lane: int, r_safe: float | None = None, sample_count: int | None = None) -> LaneChangePlan:
    scene = load_scene(scene_path)
    cfg = ExperimentConfig(scenario=scene.scenario, risk=scene.risk)
    safety = cfg.safety_config()
    overrides = {}
    if r_safe is not None or scene.r_safe is not None:
        overrides["r_safe"] = float(r_safe if r_safe is not None else scene.r_safe)
    if sample_count is not None:
        overrides["sample_count"] = sample_count
    if overrides:
        safety = replace(safety, **overrides)
    return evaluate_lane_change(scene.world, target_lane, safety)
