"""Rollouts, generalised advantage estimation and the clipped PPO update."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .env import DrivingEnv
from .nn import Adam, Network, NetworkConfig, log_softmax, softmax
from .reward import BalancedReward, RewardConfig, reward_terms
from .sim import N_ACTIONS, Action

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class PPOConfig:
    gamma_d: float = 0.99
    lambda_gae: float = 0.95
    clip_eps: float = 0.2
    epochs_per_update: int = 4
    minibatch_size: int = 64
    value_loss_weight: float = 0.5
    rollout_horizon: int = 512
    seq_len: int = 16
    learning_rate: float = 3e-4
    max_grad_norm: float | None = 0.5
    entropy_coef: float = 0.0
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma_d <= 1.0:
            raise ValueError("gamma_d must lie in (0, 1]")
        if not 0.0 <= self.lambda_gae <= 1.0:
            raise ValueError("lambda_gae must lie in [0, 1]")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.rollout_horizon < 1 or self.epochs_per_update < 1 or self.minibatch_size < 1 or self.seq_len < 1:
            raise ValueError("horizon, epochs, minibatch size and seq_len must be >= 1")


# ---------------------------------------------------------------- buffer


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    starts: np.ndarray
    h_actor: np.ndarray
    h_critic: np.ndarray
    last_value: float = 0.0
    raw_rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.actions)

    def finalize(self) -> RolloutBuffer:
        for name in ("obs", "actions", "log_probs", "rewards", "values", "dones", "starts",
                     "h_actor", "h_critic", "raw_rewards", "advantages", "returns"):
            arr = getattr(self, name)
            if arr is not None:
                arr.flags.writeable = False
        return self


def gae(rewards, values, dones, last_value: float, gamma: float, lam: float):
    """Advantages and returns; a done flag at t cuts bootstrapping from t+1."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    for t in reversed(range(n)):
        next_v = last_value if t == n - 1 else values[t + 1]
        keep = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_v * keep - values[t]
        running = delta + gamma * lam * keep * running
        adv[t] = running
    return adv, adv + values


def compute_gae(buffer: RolloutBuffer, cfg: PPOConfig) -> RolloutBuffer:
    last = 0.0 if buffer.dones[-1] else buffer.last_value
    buffer.advantages, buffer.returns = gae(
        buffer.rewards, buffer.values, buffer.dones, last, cfg.gamma_d, cfg.lambda_gae
    )
    return buffer


def normalize(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 0 else 1.0)


def clipped_objective(ratio, advantage, clip_eps: float):
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage)


def clipped_objective_grad(ratio, advantage, clip_eps: float):
    """d/d ratio of :func:`clipped_objective`; zero wherever the clipped constant is selected."""
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage
    return np.where(unclipped <= clipped, advantage, 0.0)


# ---------------------------------------------------------------- agent


class ActorCritic:
    """Separate actor and critic networks; the critic optionally sees the policy."""

    def __init__(self, net_cfg: NetworkConfig, rng: np.random.Generator, critic_uses_policy: bool = True):
        self.net_cfg = net_cfg
        self.critic_uses_policy = critic_uses_policy
        self.actor = Network(net_cfg, N_ACTIONS, rng=rng)
        self.critic = Network(net_cfg, 1, extra_dim=N_ACTIONS if critic_uses_policy else 0, rng=rng)

    def initial_state(self, batch: int = 1):
        return self.actor.initial_state(batch), self.critic.initial_state(batch)

    def step(self, obs, h_actor, h_critic):
        """Single observation -> (probs (A,), value, next actor state, next critic state)."""
        logits, ha = self.actor.forward(obs[None, None], h_actor)
        probs = softmax(logits[0, 0])
        extra = probs[None, None] if self.critic_uses_policy else None
        value, hc = self.critic.forward(obs[None, None], h_critic, extra=extra)
        return probs, float(value[0, 0, 0]), ha, hc

    def act(self, obs, h_actor):
        """Actor only: single observation -> (probs (A,), next actor state)."""
        logits, ha = self.actor.forward(obs[None, None], h_actor)
        return softmax(logits[0, 0]), ha

    def evaluate_sequence(self, obs, probs, starts, h_critic):
        """Critic over one contiguous sequence (L, ...).

        Returns (values (L,), state entering each step (L, H), final state).
        """
        extra = probs[None] if self.critic_uses_policy else None
        value, hc = self.critic.forward(obs[None], h_critic, starts[None], extra=extra)
        return value[0, :, 0], self.critic.step_states[0], hc


# ---------------------------------------------------------------- rollouts


class RolloutWorker:
    """Owns one environment, its recurrent states and the reward history."""

    def __init__(self, env: DrivingEnv, agent: ActorCritic, reward_cfg: RewardConfig, *,
                 balanced: bool, rng: np.random.Generator):
        self.env = env
        self.agent = agent
        self.reward_cfg = reward_cfg
        self.balanced = balanced
        self.shaper = BalancedReward(reward_cfg)
        self.rng = rng
        self.counters: Counter = Counter()
        self._obs = env.reset()
        self._start = True
        self._ha, self._hc = agent.initial_state()

    def collect(self, horizon: int, stop_at_done: bool = False) -> RolloutBuffer:
        """Run ``horizon`` steps, crossing episode boundaries as needed.

        With ``stop_at_done`` the buffer ends at the first terminal step.
        """
        shape = self.env.obs_shape
        hr = self.agent.net_cfg.rnn_hidden
        obs = np.zeros((horizon, *shape))
        actions = np.zeros(horizon, dtype=np.int64)
        logps, rewards, raw, values = (np.zeros(horizon) for _ in range(4))
        dones = np.zeros(horizon, dtype=bool)
        starts = np.zeros(horizon, dtype=bool)
        h_a = np.zeros((horizon, hr))
        h_c = np.zeros((horizon, hr))
        terms = Counter()
        speeds, collisions, episodes, overrides = [], 0, 0, 0

        probs_seq = np.zeros((horizon, N_ACTIONS))
        hc0 = self._hc
        for t in range(horizon):
            if self._start:
                self._ha = self.agent.actor.initial_state()
            obs[t] = self._obs
            starts[t] = self._start
            h_a[t] = self._ha[0]
            probs, self._ha = self.agent.act(self._obs, self._ha)
            probs_seq[t] = probs
            proposed = Action(int(self.rng.choice(N_ACTIONS, p=probs)))
            self._obs, outcome, executed, overridden = self.env.step(proposed)
            overrides += overridden

            parts = reward_terms(outcome.collided, outcome.lane_changed, outcome.av_speed, self.reward_cfg)
            r = parts["r_s"] + parts["r_st"] + parts["r_e"] + parts["r_a"]
            terms.update(parts)
            raw[t] = r
            if self.balanced:
                self.counters["balance"] += 1
                rewards[t] = self.shaper(r, self.env.aggregated_risk())
            else:
                rewards[t] = r
            actions[t] = int(executed)
            # behaviour log-probability of the action actually executed
            logps[t] = float(np.log(max(probs[int(executed)], 1e-300)))
            dones[t] = outcome.done
            speeds.append(outcome.av_speed)
            self._start = outcome.done
            if outcome.done:
                episodes += 1
                collisions += outcome.collided
                self._obs = self.env.reset()
                if stop_at_done:
                    horizon = t + 1
                    break

        if horizon < len(obs):
            obs, actions, logps, rewards, raw, values, dones, starts, h_a, h_c, probs_seq = (
                a[:horizon] for a in (obs, actions, logps, rewards, raw, values, dones, starts, h_a, h_c, probs_seq))

        # the critic does not influence acting, so it runs once over the whole rollout
        values[:], h_c[:], self._hc = self.agent.evaluate_sequence(obs, probs_seq, starts, hc0)
        last_value = 0.0
        if not dones[-1]:
            _, last_value, _, _ = self.agent.step(self._obs, self._ha, self._hc)
        info = {
            "collisions": collisions,
            "episodes": episodes,
            "overrides": overrides,
            "mean_speed": float(np.mean(speeds)),
            **{f"mean_{k}": v / horizon for k, v in terms.items()},
        }
        return RolloutBuffer(obs, actions, logps, rewards, values, dones, starts, h_a, h_c,
                             last_value=last_value, raw_rewards=raw, info=info)


def collect_rollout(worker: RolloutWorker, cfg: PPOConfig) -> RolloutBuffer:
    return worker.collect(cfg.rollout_horizon)


# ---------------------------------------------------------------- update


def _chunks(n: int, seq_len: int) -> list[tuple[int, int]]:
    return [(s, min(s + seq_len, n)) for s in range(0, n, seq_len)]


def _gather(buffer: RolloutBuffer, adv: np.ndarray, chunks, seq_len: int):
    """Pack chunks into (B, seq_len, ...) arrays; ``mask`` marks real steps."""
    b = len(chunks)
    obs = np.zeros((b, seq_len, *buffer.obs.shape[1:]))
    starts = np.ones((b, seq_len), dtype=bool)
    mask = np.zeros((b, seq_len))
    act = np.zeros((b, seq_len), dtype=np.int64)
    old_lp, a, ret = (np.zeros((b, seq_len)) for _ in range(3))
    h_a = np.zeros((b, buffer.h_actor.shape[1]))
    h_c = np.zeros((b, buffer.h_critic.shape[1]))
    for i, (s, e) in enumerate(chunks):
        n = e - s
        obs[i, :n] = buffer.obs[s:e]
        starts[i, :n] = buffer.starts[s:e]
        starts[i, 0] = False  # chunk state comes from h_a / h_c
        mask[i, :n] = 1.0
        act[i, :n] = buffer.actions[s:e]
        old_lp[i, :n] = buffer.log_probs[s:e]
        a[i, :n] = adv[s:e]
        ret[i, :n] = buffer.returns[s:e]
        h_a[i] = buffer.h_actor[s]
        h_c[i] = buffer.h_critic[s]
    return obs, starts, mask, act, old_lp, a, ret, h_a, h_c


def ppo_losses(agent: ActorCritic, batch, cfg: PPOConfig, *, backward: bool = True):
    """Clipped surrogate + value regression on one packed minibatch.

    Returns (stats, actor grads, critic grads). The policy term is the mean
    clipped objective to be *maximised*; gradients are for the loss
    ``-L_clip - entropy_coef * H + value_loss_weight * MSE``.
    """
    obs, starts, mask, act, old_lp, adv, ret, h_a, h_c = batch
    m = mask.sum()
    logits, _ = agent.actor.forward(obs, h_a, starts)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    logp = np.take_along_axis(logp_all, act[..., None], axis=2)[..., 0]
    ratio = np.exp(logp - old_lp)
    surr = clipped_objective(ratio, adv, cfg.clip_eps)
    policy_obj = float((surr * mask).sum() / m)
    entropy = -(probs * logp_all).sum(axis=2)
    extra = probs if agent.critic_uses_policy else None
    v, _ = agent.critic.forward(obs, h_c, starts, extra=extra)
    v = v[..., 0]
    value_loss = float((((ret - v) ** 2) * mask).sum() / m)
    loss = -policy_obj - cfg.entropy_coef * float((entropy * mask).sum() / m) + cfg.value_loss_weight * value_loss
    stats = {
        "loss": loss,
        "policy_objective": policy_obj,
        "value_loss": value_loss,
        "mean_ratio": float((ratio * mask).sum() / m),
        "clip_fraction": float(((np.abs(ratio - 1.0) > cfg.clip_eps) * mask).sum() / m),
        "entropy": float((entropy * mask).sum() / m),
    }
    if not np.isfinite(loss):
        raise NonFiniteLossError("non-finite PPO loss", stats)
    if not backward:
        return stats, None, None

    d_ratio = clipped_objective_grad(ratio, adv, cfg.clip_eps)
    onehot = np.eye(N_ACTIONS)[act]
    # d(-obj)/d logits = -d_ratio * ratio * (onehot - p) / m
    dlogits = -(d_ratio * ratio * mask / m)[..., None] * (onehot - probs)
    if cfg.entropy_coef:
        dH = -probs * (logp_all + entropy[..., None])
        dlogits -= cfg.entropy_coef * (mask / m)[..., None] * dH
    dv = (cfg.value_loss_weight * 2.0 * (v - ret) * mask / m)[..., None]
    g_critic, _ = agent.critic.backward(dv)
    g_actor, _ = agent.actor.backward(dlogits)
    return stats, g_actor, g_critic


def ppo_update(buffer: RolloutBuffer, agent: ActorCritic, optimizers: tuple[Adam, Adam], cfg: PPOConfig,
               rng: np.random.Generator) -> dict[str, float]:
    """Several epochs of minibatch PPO over contiguous recurrent chunks."""
    if buffer.advantages is None:
        raise ValueError("compute_gae() must run before ppo_update()")
    adv = normalize(buffer.advantages) if cfg.normalize_advantages else np.asarray(buffer.advantages)
    chunks = _chunks(len(buffer), cfg.seq_len)
    per_batch = max(1, cfg.minibatch_size // cfg.seq_len)
    opt_a, opt_c = optimizers
    totals: Counter = Counter()
    n = 0
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(len(chunks))
        for i in range(0, len(order), per_batch):
            sel = [chunks[j] for j in order[i:i + per_batch]]
            batch = _gather(buffer, adv, sel, cfg.seq_len)
            stats, g_a, g_c = ppo_losses(agent, batch, cfg)
            bad = [k for k, g in (*g_a.items(), *g_c.items()) if not np.all(np.isfinite(g))]
            if bad:
                raise NonFiniteLossError(f"non-finite gradients in {bad[:3]}", stats)
            opt_a.step(g_a)
            opt_c.step(g_c)
            totals.update(stats)
            n += 1
    return {k: v / n for k, v in totals.items()}
