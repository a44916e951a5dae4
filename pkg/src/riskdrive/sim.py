"""Kinematic multi-lane highway with IDM traffic.

Coordinates: x grows along the direction of travel, y grows towards the
upper lanes. Lane ``k`` is centred at ``(k + 0.5) * lane_width``, lane 0 is
the bottom lane. Vehicle 0 of every world is the autonomous vehicle (AV).

All functions here are pure: ``step`` never mutates its input world.
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np


class InfeasibleScenarioError(ValueError):
    """The requested traffic cannot be placed on the road without overlap."""


class LifecycleError(RuntimeError):
    """An operation was called in the wrong episode phase."""


class Action(enum.IntEnum):
    KEEP_LANE = 0
    CHANGE_LEFT = 1
    CHANGE_RIGHT = 2
    ACCELERATE = 3
    DECELERATE = 4

    @property
    def lane_delta(self) -> int:
        if self is Action.CHANGE_LEFT:
            return 1
        if self is Action.CHANGE_RIGHT:
            return -1
        return 0


N_ACTIONS = len(Action)


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    v: float
    heading: float = 0.0
    lane: int = 0
    length: float = 5.0
    width: float = 2.0
    is_av: bool = False

    def __post_init__(self):
        if self.v < 0:
            raise ValueError(f"speed must be >= 0, got {self.v}")
        if self.length <= 0 or self.width <= 0:
            raise ValueError("vehicle dimensions must be positive")
        if abs(self.heading) >= math.pi / 2:
            raise ValueError("heading must satisfy |heading| < pi/2")


@dataclass(frozen=True)
class ScenarioConfig:
    lane_count: int = 3
    lane_width: float = 4.0
    road_length: float = 1000.0
    hdv_count: int = 5
    av_speed_range: tuple[float, float] = (23.0, 25.0)
    hdv_speed_range: tuple[float, float] = (18.0, 24.0)
    hdv_spawn_gap_range: tuple[float, float] = (10.0, 30.0)
    max_speed: float = 40.0
    dt: float = 0.1
    max_steps: int = 400
    seed: int = 0
    # when set, the HDV count of each episode is drawn from [hdv_count, hdv_count_max]
    hdv_count_max: int | None = None
    hdv_lane_change_prob: float = 0.0
    av_speed_step: float = 1.5
    lane_change_duration: float = 1.5
    vehicle_length: float = 5.0
    vehicle_width: float = 2.0

    def __post_init__(self):
        if self.lane_count < 2:
            raise ValueError("lane_count must be >= 2")
        if self.lane_width <= 0:
            raise ValueError("lane_width must be > 0")
        if self.hdv_count < 0:
            raise ValueError("hdv_count must be >= 0")
        if self.hdv_count_max is not None and self.hdv_count_max < self.hdv_count:
            raise ValueError("hdv_count_max must be >= hdv_count")
        for name in ("av_speed_range", "hdv_speed_range", "hdv_spawn_gap_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be a nonempty interval")
            if lo < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.max_speed <= 0 or self.max_steps < 1:
            raise ValueError("max_speed and max_steps must be positive")
        if not 0.0 <= self.hdv_lane_change_prob <= 1.0:
            raise ValueError("hdv_lane_change_prob must lie in [0, 1]")

    def lane_center(self, lane: int) -> float:
        return (lane + 0.5) * self.lane_width


@dataclass(frozen=True)
class IDMParams:
    max_accel: float = 1.5
    comfort_decel: float = 2.0
    min_gap: float = 2.0
    time_headway: float = 1.5
    delta: float = 4.0
    max_brake: float = 9.0


@dataclass(frozen=True)
class Maneuver:
    """An in-progress lateral move between two lane centres."""

    source_lane: int
    target_lane: int
    y_start: float
    y_end: float
    elapsed: float = 0.0


@dataclass(frozen=True)
class World:
    config: ScenarioConfig
    vehicles: tuple[VehicleState, ...]
    desired_speeds: tuple[float, ...]
    maneuvers: tuple[Maneuver | None, ...]
    seed: int
    time: float = 0.0
    step_count: int = 0
    done: bool = False
    done_reason: str | None = None
    idm: IDMParams = field(default_factory=IDMParams)

    @property
    def av(self) -> VehicleState:
        return self.vehicles[0]

    @property
    def hdvs(self) -> tuple[VehicleState, ...]:
        return self.vehicles[1:]

    @property
    def av_maneuver(self) -> Maneuver | None:
        return self.maneuvers[0]


@dataclass(frozen=True)
class StepOutcome:
    next_state: World
    collided: bool
    off_road: bool
    av_speed: float
    lane_changed: bool
    done: bool
    done_reason: str | None


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator keyed by a root seed and a stream name."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


# ---------------------------------------------------------------- reset


def reset(config: ScenarioConfig, seed: int | None = None) -> World:
    """Place the AV in a middle lane at x = 0 and scatter HDVs around it.

    HDVs are laid out one after another with longitudinal gaps drawn from
    ``hdv_spawn_gap_range``; roughly a third go behind the AV, the rest ahead.
    Gaps are measured bumper to bumper regardless of lane, so nothing overlaps.
    """
    seed = config.seed if seed is None else seed
    rng = substream(seed, "reset")
    cfg = config
    n_hdv = cfg.hdv_count
    if cfg.hdv_count_max is not None:
        n_hdv = int(rng.integers(cfg.hdv_count, cfg.hdv_count_max + 1))

    gap_lo, _ = cfg.hdv_spawn_gap_range
    needed = cfg.vehicle_length + n_hdv * (cfg.vehicle_length + gap_lo)
    if needed > cfg.road_length:
        raise InfeasibleScenarioError(
            f"{n_hdv} HDVs need at least {needed:.1f} m of road, only {cfg.road_length:.1f} m available"
        )

    av_lane = (cfg.lane_count - 1) // 2 if cfg.lane_count % 2 else cfg.lane_count // 2 - 1
    av_speed = float(rng.uniform(*cfg.av_speed_range))
    av = VehicleState(
        x=0.0, y=cfg.lane_center(av_lane), v=av_speed, lane=av_lane,
        length=cfg.vehicle_length, width=cfg.vehicle_width, is_av=True,
    )
    vehicles = [av]
    desired = [av_speed]

    n_behind = n_hdv // 3
    half = cfg.vehicle_length  # centre-to-centre offset for equal lengths: L/2 + L/2
    front_edge, rear_edge = 0.0, 0.0
    for k in range(n_hdv):
        gap = float(rng.uniform(*cfg.hdv_spawn_gap_range))
        lane = int(rng.integers(cfg.lane_count))
        speed = float(rng.uniform(*cfg.hdv_speed_range))
        if k < n_behind:
            rear_edge -= gap + half
            x = rear_edge
        else:
            front_edge += gap + half
            x = front_edge
        vehicles.append(VehicleState(
            x=x, y=cfg.lane_center(lane), v=speed, lane=lane,
            length=cfg.vehicle_length, width=cfg.vehicle_width,
        ))
        desired.append(speed)

    return World(
        config=cfg,
        vehicles=tuple(vehicles),
        desired_speeds=tuple(desired),
        maneuvers=(None,) * len(vehicles),
        seed=seed,
    )


def make_world(config: ScenarioConfig, vehicles, desired_speeds=None, seed: int = 0) -> World:
    """Build a world from explicit vehicle states (AV first or flagged ``is_av``)."""
    vehicles = list(vehicles)
    av_idx = [i for i, v in enumerate(vehicles) if v.is_av]
    if len(av_idx) > 1:
        raise ValueError("a world holds exactly one AV")
    if av_idx:
        vehicles.insert(0, vehicles.pop(av_idx[0]))
    elif vehicles:
        vehicles[0] = replace(vehicles[0], is_av=True)
    else:
        raise ValueError("a world needs at least the AV")
    for v in vehicles:
        if not 0 <= v.lane < config.lane_count:
            raise ValueError(f"lane {v.lane} outside [0, {config.lane_count})")
    if desired_speeds is None:
        desired_speeds = [v.v for v in vehicles]
    return World(
        config=config,
        vehicles=tuple(vehicles),
        desired_speeds=tuple(float(s) for s in desired_speeds),
        maneuvers=(None,) * len(vehicles),
        seed=seed,
    )


# ---------------------------------------------------------------- geometry


def _corners(v: VehicleState) -> list[tuple[float, float]]:
    c, s = math.cos(v.heading), math.sin(v.heading)
    hl, hw = v.length / 2, v.width / 2
    return [
        (v.x + c * dx - s * dy, v.y + s * dx + c * dy)
        for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    ]


def rectangles_intersect(a: VehicleState, b: VehicleState) -> bool:
    """Separating-axis test for two oriented rectangles (touching counts)."""
    reach = (math.hypot(a.length, a.width) + math.hypot(b.length, b.width)) / 2
    if abs(a.x - b.x) > reach or abs(a.y - b.y) > reach:
        return False
    ca, cb = _corners(a), _corners(b)
    for h in (a.heading, b.heading):
        for ax, ay in ((math.cos(h), math.sin(h)), (-math.sin(h), math.cos(h))):
            pa = [px * ax + py * ay for px, py in ca]
            pb = [px * ax + py * ay for px, py in cb]
            if max(pa) < min(pb) or max(pb) < min(pa):
                return False
    return True


def occupied_lanes(v: VehicleState, config: ScenarioConfig) -> set[int]:
    lo = int(math.floor((v.y - v.width / 2) / config.lane_width))
    hi = int(math.floor((v.y + v.width / 2) / config.lane_width))
    return {k for k in range(lo, hi + 1) if 0 <= k < config.lane_count}


# ---------------------------------------------------------------- queries


def front_gap(world: World, lane: int) -> float | None:
    """Bumper-to-bumper distance from the AV to the nearest HDV ahead in ``lane``."""
    if not 0 <= lane < world.config.lane_count:
        raise ValueError(f"invalid lane {lane}")
    av = world.av
    best = None
    for h in world.hdvs:
        if h.lane != lane or h.x <= av.x:
            continue
        gap = h.x - av.x - (h.length + av.length) / 2
        if best is None or gap < best:
            best = gap
    return best


def rear_gap(world: World, lane: int) -> float | None:
    av = world.av
    best = None
    for h in world.hdvs:
        if h.lane != lane or h.x > av.x:
            continue
        gap = av.x - h.x - (h.length + av.length) / 2
        if best is None or gap < best:
            best = gap
    return best


SELECTION_GAP = 20.0


def select_relevant_hdvs(world: World) -> list[VehicleState]:
    """HDVs that matter to the AV's decision.

    The front and rear vehicle in the AV's lane are always kept. For each
    adjacent lane: when the AV's own front gap plus rear gap exceeds 20 m,
    every vehicle lying between the AV's rear and front neighbours (or
    laterally overlapping the AV) is kept; otherwise only the nearest one.
    """
    av = world.av
    lane = av.lane
    same = [h for h in world.hdvs if h.lane == lane]
    ahead = [h for h in same if h.x > av.x]
    behind = [h for h in same if h.x <= av.x]
    fv = min(ahead, key=lambda h: h.x) if ahead else None
    rv = max(behind, key=lambda h: h.x) if behind else None
    chosen: list[VehicleState] = [h for h in (fv, rv) if h is not None]

    fgap = math.inf if fv is None else fv.x - av.x - (fv.length + av.length) / 2
    rgap = math.inf if rv is None else av.x - rv.x - (rv.length + av.length) / 2
    wide_open = fgap + rgap > SELECTION_GAP
    x_lo = -math.inf if rv is None else rv.x
    x_hi = math.inf if fv is None else fv.x

    for adj in (lane - 1, lane + 1):
        if not 0 <= adj < world.config.lane_count:
            continue
        cands = [h for h in world.hdvs if h.lane == adj]
        if not cands:
            continue
        if wide_open:
            for h in cands:
                in_range = x_lo <= h.x <= x_hi
                lateral = abs(h.y - av.y) < (h.width + av.width) / 2
                if in_range or lateral:
                    chosen.append(h)
        else:
            chosen.append(min(cands, key=lambda h: abs(h.x - av.x)))
    return chosen


def legal_actions(world: World) -> list[Action]:
    """Actions the simulator will execute as-is (lane changes masked at edges)."""
    acts = [Action.KEEP_LANE, Action.ACCELERATE, Action.DECELERATE]
    if world.av_maneuver is None:
        if world.av.lane + 1 < world.config.lane_count:
            acts.append(Action.CHANGE_LEFT)
        if world.av.lane > 0:
            acts.append(Action.CHANGE_RIGHT)
    return sorted(acts)


def is_executable(world: World, action: Action) -> bool:
    return Action(action) in legal_actions(world)


# ---------------------------------------------------------------- dynamics


def smoothstep(u: float) -> float:
    u = min(max(u, 0.0), 1.0)
    return u * u * (3.0 - 2.0 * u)


def _leader(world: World, i: int) -> VehicleState | None:
    me = world.vehicles[i]
    lanes = {me.lane}
    m = world.maneuvers[i]
    if m is not None:
        lanes.add(m.target_lane)
    best = None
    for j, other in enumerate(world.vehicles):
        if j == i or other.x <= me.x:
            continue
        if not lanes & _lanes_claimed(world, j):
            continue
        if best is None or other.x < best.x:
            best = other
    return best


def _lanes_claimed(world: World, j: int) -> set[int]:
    v = world.vehicles[j]
    lanes = {v.lane}
    m = world.maneuvers[j]
    if m is not None:
        lanes.add(m.target_lane)
    return lanes


def idm_accel(v: float, v0: float, gap: float | None, dv: float, p: IDMParams) -> float:
    """IDM acceleration; ``dv`` is own speed minus leader speed."""
    free = 1.0 - (v / v0) ** p.delta if v0 > 0 else -1.0
    if gap is None:
        a = p.max_accel * free
    else:
        s_star = p.min_gap + max(0.0, v * p.time_headway + v * dv / (2.0 * math.sqrt(p.max_accel * p.comfort_decel)))
        a = p.max_accel * (free - (s_star / max(gap, 1e-3)) ** 2)
    return max(a, -p.max_brake)


def _advance_lateral(state: VehicleState, m: Maneuver, dt: float, duration: float, travel: float):
    """Move ``state`` one step along its maneuver; returns (y, heading, maneuver|None, lane)."""
    elapsed = m.elapsed + dt
    y_des = m.y_start + (m.y_end - m.y_start) * smoothstep(elapsed / duration)
    dy = min(max(y_des - state.y, -travel), travel)
    y = state.y + dy
    finished = elapsed >= duration - 1e-9 and abs(m.y_end - y) <= 1e-9
    if finished:
        y = m.y_end
    dx = math.sqrt(max(travel * travel - dy * dy, 0.0))
    heading = math.atan2(dy, dx) if travel > 0 else 0.0
    heading = max(min(heading, 1.5), -1.5)
    if finished:
        return y, 0.0, None, m.target_lane
    return y, heading, replace(m, elapsed=elapsed), state.lane


def step(world: World, av_action: Action) -> StepOutcome:
    """Advance every vehicle by ``dt``.

    Lane changes requested from an edge lane or during an ongoing maneuver
    are masked to ``KEEP_LANE``.
    """
    if world.done:
        raise LifecycleError("step() called on a finished episode")
    cfg = world.config
    dt = cfg.dt
    av_action = Action(av_action)
    if not is_executable(world, av_action):
        av_action = Action.KEEP_LANE

    new_vehicles = []
    new_maneuvers = []
    lane_changed = False

    # AV
    av = world.av
    v_new = av.v
    if av_action is Action.ACCELERATE:
        v_new = min(av.v + cfg.av_speed_step, cfg.max_speed)
    elif av_action is Action.DECELERATE:
        v_new = max(av.v - cfg.av_speed_step, 0.0)
    man = world.av_maneuver
    if av_action.lane_delta:
        target = av.lane + av_action.lane_delta
        man = Maneuver(av.lane, target, av.y, cfg.lane_center(target))
        lane_changed = True
    travel = v_new * dt
    if man is not None:
        y, heading, man, lane = _advance_lateral(av, man, dt, cfg.lane_change_duration, travel)
        dx = math.sqrt(max(travel * travel - (y - av.y) ** 2, 0.0))
    else:
        y, heading, lane, dx = av.y, 0.0, av.lane, travel
    new_vehicles.append(replace(av, x=av.x + dx, y=y, v=v_new, heading=heading, lane=lane))
    new_maneuvers.append(man)

    # HDVs
    lc_rng = None
    if cfg.hdv_lane_change_prob > 0:
        lc_rng = np.random.default_rng([world.seed & 0xFFFFFFFFFFFFFFFF, world.step_count, 0x4C43])
    for i in range(1, len(world.vehicles)):
        h = world.vehicles[i]
        lead = _leader(world, i)
        if lead is None:
            a = idm_accel(h.v, world.desired_speeds[i], None, 0.0, world.idm)
        else:
            gap = lead.x - h.x - (lead.length + h.length) / 2
            a = idm_accel(h.v, world.desired_speeds[i], gap, h.v - lead.v, world.idm)
        hv = min(max(h.v + a * dt, 0.0), cfg.max_speed)
        m = world.maneuvers[i]
        if lc_rng is not None:
            draw = lc_rng.random(2)
            if m is None and draw[0] < cfg.hdv_lane_change_prob:
                options = [k for k in (h.lane - 1, h.lane + 1) if 0 <= k < cfg.lane_count]
                target = options[int(draw[1] * len(options))]
                m = Maneuver(h.lane, target, h.y, cfg.lane_center(target))
        travel = hv * dt
        if m is not None:
            hy, hhead, m, hlane = _advance_lateral(h, m, dt, cfg.lane_change_duration, travel)
            hdx = math.sqrt(max(travel * travel - (hy - h.y) ** 2, 0.0))
        else:
            hy, hhead, hlane, hdx = h.y, 0.0, h.lane, travel
        new_vehicles.append(replace(h, x=h.x + hdx, y=hy, v=hv, heading=hhead, lane=hlane))
        new_maneuvers.append(m)

    new_av = new_vehicles[0]
    collided = any(rectangles_intersect(new_av, h) for h in new_vehicles[1:])
    off_road = new_av.y - new_av.width / 2 < 0 or new_av.y + new_av.width / 2 > cfg.lane_count * cfg.lane_width
    step_count = world.step_count + 1
    reason = None
    if collided or off_road:
        reason = "collision"
    elif new_av.x >= cfg.road_length:
        reason = "goal"
    elif step_count >= cfg.max_steps:
        reason = "horizon"
    nxt = replace(
        world,
        vehicles=tuple(new_vehicles),
        maneuvers=tuple(new_maneuvers),
        time=world.time + dt,
        step_count=step_count,
        done=reason is not None,
        done_reason=reason,
    )
    return StepOutcome(
        next_state=nxt,
        collided=collided,
        off_road=off_road,
        av_speed=new_av.v,
        lane_changed=lane_changed,
        done=reason is not None,
        done_reason=reason,
    )
