"""Pre-execution safety gate for lane changes and lane keeping.

A proposed lane change is turned into a cubic lateral trajectory, sampled at
``sample_count`` instants, and scored by summing ``w_s * R_s + w_d * R_d``
against every considered HDV (propagated at constant speed). The maneuver is
certified when that cumulative risk does not exceed ``r_safe``. Lane keeping
and acceleration are vetoed in favour of braking when the front gap is below
``min_keep_gap``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .risk import RiskParams, dynamic_risk_at, static_risk_at
from .sim import Action, VehicleState, World, front_gap, is_executable, select_relevant_hdvs


class InvalidManeuverError(ValueError):
    pass


@dataclass(frozen=True)
class SafetyConfig:
    r_safe: float = 2.5
    sample_count: int = 20
    lane_change_duration: float = 1.5
    min_keep_gap: float = 10.0
    lane_width: float = 4.0
    # "smoothstep" reaches the target lane; "verbatim" is the printed cubic
    profile: str = "smoothstep"
    # "selected" applies the HDV-selection rule, "all" scores every HDV
    hdv_scope: str = "selected"
    risk_params: RiskParams = field(default_factory=RiskParams)

    def __post_init__(self):
        if not self.r_safe > 0:
            raise ValueError("r_safe must be > 0")
        if self.sample_count < 2:
            raise ValueError("sample_count must be >= 2")
        if not self.min_keep_gap > 0 or not self.lane_change_duration > 0:
            raise ValueError("min_keep_gap and lane_change_duration must be > 0")
        if self.profile not in ("smoothstep", "verbatim"):
            raise ValueError(f"unknown lateral profile {self.profile!r}")
        if self.hdv_scope not in ("selected", "all"):
            raise ValueError(f"unknown hdv_scope {self.hdv_scope!r}")


@dataclass
class LaneChangePlan:
    x_r: float
    sample_count: int
    samples: np.ndarray  # (N, 3): t, x, y
    per_point_risk: np.ndarray  # (N, 2): R_s, R_d summed over HDVs
    r_total: float
    r_safe: float
    certified: bool
    weights: tuple[float, float] = (0.5, 0.5)

    def cumulative(self) -> np.ndarray:
        w_s, w_d = self.weights
        return np.cumsum(w_s * self.per_point_risk[:, 0] + w_d * self.per_point_risk[:, 1])

    def to_csv(self, dest) -> None:
        """Write the per-sample table to a path or an open text stream."""
        if hasattr(dest, "write"):
            self._write_rows(dest)
        else:
            with open(dest, "w", newline="") as fh:
                self._write_rows(fh)

    def _write_rows(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "R_s", "R_d", "cumulative"])
        for (t, x, y), (rs, rd), c in zip(self.samples, self.per_point_risk, self.cumulative()):
            w.writerow([f"{t:.6f}", f"{x:.6f}", f"{y:.6f}", f"{rs:.10g}", f"{rd:.10g}", f"{c:.10g}"])


def lane_change_y(x: float, x_r: float) -> float:
    """The cubic lane-change curve exactly as printed: -2 + 2u - 3u^2 + u^3 with u = x/x_r."""
    if not x_r > 0:
        raise ValueError("x_r must be > 0")
    if not 0.0 <= x <= x_r:
        raise ValueError(f"x={x} outside [0, {x_r}]")
    return -2.0 + (2.0 / x_r) * x - (3.0 / x_r**2) * x**2 + (1.0 / x_r**3) * x**3


def _lateral_fraction(progress: np.ndarray, profile: str) -> np.ndarray:
    """Fraction of the lateral offset covered at longitudinal progress in [0, 1]."""
    if profile == "smoothstep":
        return progress * progress * (3.0 - 2.0 * progress)
    # verbatim curve evaluated over [0, x_r] and shifted so it starts at zero
    return np.array([lane_change_y(u, 1.0) + 2.0 for u in progress])


def build_trajectory(av: VehicleState, target_lane: int, cfg: SafetyConfig) -> np.ndarray:
    """(N, 3) array of (t_i, x_i, y_i) in world coordinates."""
    if abs(target_lane - av.lane) != 1:
        raise InvalidManeuverError(f"lane {target_lane} is not adjacent to lane {av.lane}")
    t = np.linspace(0.0, cfg.lane_change_duration, cfg.sample_count)
    progress = t / cfg.lane_change_duration
    x = av.x + av.v * t
    y_target = (target_lane + 0.5) * cfg.lane_width
    y = av.y + (y_target - av.y) * _lateral_fraction(progress, cfg.profile)
    return np.column_stack([t, x, y])


def trajectory_risk(samples: np.ndarray, v_av: float, hdvs: Sequence[VehicleState], p: RiskParams) -> np.ndarray:
    """(N, 2) static and dynamic risk per sample, summed over ``hdvs``."""
    t, x, y = samples[:, 0], samples[:, 1], samples[:, 2]
    out = np.zeros((len(samples), 2))
    for h in hdvs:
        dx = x - (h.x + h.v * t)
        dy = y - h.y
        v_rel = 1.0 if h.v > v_av else -1.0
        out[:, 0] += static_risk_at(dx, dy, p)
        out[:, 1] += dynamic_risk_at(dx, dy, v_rel, h.length, p)
    return out


def considered_hdvs(world: World, cfg: SafetyConfig) -> list[VehicleState]:
    return select_relevant_hdvs(world) if cfg.hdv_scope == "selected" else list(world.hdvs)


def plan_lane_change(av: VehicleState, hdvs: Sequence[VehicleState], target_lane: int, cfg: SafetyConfig) -> LaneChangePlan:
    p = cfg.risk_params
    samples = build_trajectory(av, target_lane, cfg)
    per_point = trajectory_risk(samples, av.v, hdvs, p)
    r_total = float(np.sum(p.w_s * per_point[:, 0] + p.w_d * per_point[:, 1]))
    return LaneChangePlan(
        x_r=av.v * cfg.lane_change_duration / 2,
        sample_count=cfg.sample_count,
        samples=samples,
        per_point_risk=per_point,
        r_total=r_total,
        r_safe=cfg.r_safe,
        certified=r_total <= cfg.r_safe,
        weights=(p.w_s, p.w_d),
    )


def evaluate_lane_change(world: World, target_lane: int, cfg: SafetyConfig) -> LaneChangePlan:
    if not 0 <= target_lane < world.config.lane_count:
        raise InvalidManeuverError(f"lane {target_lane} does not exist")
    return plan_lane_change(world.av, considered_hdvs(world, cfg), target_lane, cfg)


def keep_gap(world: World) -> float | None:
    """Smallest front gap over the lanes the AV currently occupies or is entering."""
    lanes = {world.av.lane}
    if world.av_maneuver is not None:
        lanes.add(world.av_maneuver.target_lane)
    gaps = [g for g in (front_gap(world, k) for k in lanes) if g is not None]
    return min(gaps) if gaps else None


def gate_action(world: World, proposed: Action, cfg: SafetyConfig) -> tuple[Action, bool]:
    """Return an executable, risk-checked action and whether it was overridden."""
    proposed = Action(proposed)
    if proposed.lane_delta:
        if not is_executable(world, proposed):
            return Action.KEEP_LANE, True
        plan = evaluate_lane_change(world, world.av.lane + proposed.lane_delta, cfg)
        if not plan.certified:
            return Action.KEEP_LANE, True
        return proposed, False
    if proposed in (Action.KEEP_LANE, Action.ACCELERATE):
        gap = keep_gap(world)
        if gap is not None and gap < cfg.min_keep_gap:
            return Action.DECELERATE, True
    return proposed, False
