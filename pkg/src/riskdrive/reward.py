"""Per-step reward terms and the balanced (history-mixed) reward."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np


class InsufficientHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    w_safety: float = 10.0
    w_stability: float = 0.5
    w_efficiency: float = 1.0
    r_const: float = 0.1
    max_speed: float = 40.0
    ema_keep: float = 0.99
    gamma_b_min: float = 0.2
    gamma_b_max: float = 0.9
    risk_to_gamma_scale: float = 0.2
    # "ema" or "mean" form of the historical average
    history: str = "ema"

    def __post_init__(self):
        if not 0.0 < self.ema_keep < 1.0:
            raise ValueError("ema_keep must lie in (0, 1)")
        if not 0.0 <= self.gamma_b_min <= self.gamma_b_max <= 1.0:
            raise ValueError("need 0 <= gamma_b_min <= gamma_b_max <= 1")
        if self.history not in ("ema", "mean"):
            raise ValueError(f"unknown history form {self.history!r}")
        if not self.max_speed > 0:
            raise ValueError("max_speed must be > 0")

    @property
    def ema_new(self) -> float:
        """Weight of the newest reward, 1 - ema_keep taken on the decimal literal.

        Plain float subtraction gives 1 - 0.99 = 0.010000000000000009.
        """
        return float(Decimal(1) - Decimal(repr(self.ema_keep)))


@dataclass
class RewardState:
    r_ave_ema: float = 0.0
    step_rewards: list[float] = field(default_factory=list)

    @property
    def step_index(self) -> int:
        return len(self.step_rewards)

    @property
    def current_step(self) -> int:
        """Index N of the step about to be rewarded (history holds steps 1..N-1)."""
        return len(self.step_rewards) + 1


def reward_terms(collided: bool, lane_changed: bool, av_speed: float, cfg: RewardConfig) -> dict[str, float]:
    return {
        "r_s": -cfg.w_safety if collided else 0.0,
        "r_st": -cfg.w_stability if lane_changed else 0.0,
        "r_e": cfg.w_efficiency * (av_speed / cfg.max_speed),
        "r_a": cfg.r_const,
    }


def step_reward(outcome, cfg: RewardConfig) -> float:
    t = reward_terms(outcome.collided, outcome.lane_changed, outcome.av_speed, cfg)
    return t["r_s"] + t["r_st"] + t["r_e"] + t["r_a"]


def update_ema(state: RewardState, r_current: float, cfg: RewardConfig) -> RewardState:
    return RewardState(
        r_ave_ema=cfg.ema_keep * state.r_ave_ema + cfg.ema_new * r_current,
        step_rewards=[*state.step_rewards, r_current],
    )


def historical_mean(state: RewardState) -> float:
    if state.current_step < 2:
        raise InsufficientHistoryError("the arithmetic mean needs at least one past step")
    return float(np.mean(state.step_rewards))


def balance_coefficient(aggregated_risk: float, cfg: RewardConfig) -> float:
    if aggregated_risk < 0:
        raise ValueError("aggregated risk must be >= 0")
    g = cfg.gamma_b_min + cfg.risk_to_gamma_scale * aggregated_risk
    return min(max(g, cfg.gamma_b_min), cfg.gamma_b_max)


def balanced_reward(r_ave: float, r_current: float, gamma_b: float) -> float:
    if not 0.0 <= gamma_b <= 1.0:
        raise ValueError("gamma_b must lie in [0, 1]")
    return (1.0 - gamma_b) * r_ave + gamma_b * r_current


class BalancedReward:
    """Stateful wrapper used during rollouts: mixes history, then records the step."""

    def __init__(self, cfg: RewardConfig):
        self.cfg = cfg
        self.state = RewardState()
        self._running_sum = 0.0

    def __call__(self, r_current: float, aggregated_risk: float) -> float:
        gamma_b = balance_coefficient(aggregated_risk, self.cfg)
        if self.cfg.history == "ema":
            r_ave = self.state.r_ave_ema
        elif self.state.step_rewards:
            r_ave = self._running_sum / len(self.state.step_rewards)
        else:
            r_ave = r_current
        out = balanced_reward(r_ave, r_current, gamma_b)
        self.state.r_ave_ema = self.cfg.ema_keep * self.state.r_ave_ema + self.cfg.ema_new * r_current
        self.state.step_rewards.append(r_current)
        self._running_sum += r_current
        return out
