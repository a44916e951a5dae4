import math
from dataclasses import replace
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from riskdrive import sim
from riskdrive.sim import (
    Action,
    InfeasibleScenarioError,
    LifecycleError,
    ScenarioConfig,
    VehicleState,
    front_gap,
    make_world,
    rectangles_intersect,
    select_relevant_hdvs,
)

from helpers import CFG3, car


def test_reset_places_requested_traffic_without_overlap():
    cfg = ScenarioConfig(lane_count=3, lane_width=4.0, hdv_count=5)
    w = sim.reset(cfg, 42)
    assert len(w.vehicles) == 6
    assert w.av.is_av and not any(h.is_av for h in w.hdvs)
    for a, b in combinations(w.vehicles, 2):
        assert not rectangles_intersect(a, b)


def test_reset_empty_traffic():
    w = sim.reset(ScenarioConfig(hdv_count=0), 0)
    assert len(w.vehicles) == 1 and w.hdvs == ()


def test_reset_infeasible():
    with pytest.raises(InfeasibleScenarioError):
        sim.reset(ScenarioConfig(road_length=10.0, hdv_count=50), 0)


def test_reset_hdv_count_range():
    cfg = ScenarioConfig(hdv_count=4, hdv_count_max=5)
    counts = {len(sim.reset(cfg, s).hdvs) for s in range(40)}
    assert counts == {4, 5}


@given(st.integers(0, 2**32), st.integers(0, 6))
def test_reset_never_overlaps(seed, n):
    w = sim.reset(ScenarioConfig(hdv_count=n), seed)
    for a, b in combinations(w.vehicles, 2):
        assert not rectangles_intersect(a, b)
    assert all(0 <= v.lane < 3 for v in w.vehicles)


def test_straight_line_step():
    w = make_world(CFG3, [car(0.0, 1, v=25.0)])
    out = sim.step(w, Action.KEEP_LANE)
    assert out.next_state.av.x == pytest.approx(2.5, abs=1e-12)
    assert not out.collided and not out.done


def test_collision_ends_episode():
    w = make_world(CFG3, [car(0.0, 1, v=25.0), car(5.5, 1, v=0.0)])
    out = sim.step(w, Action.KEEP_LANE)
    assert out.collided and out.done and out.done_reason == "collision"
    with pytest.raises(LifecycleError):
        sim.step(out.next_state, Action.KEEP_LANE)


def test_accelerate_clamped_at_max_speed():
    w = make_world(CFG3, [car(0.0, 1, v=CFG3.max_speed)])
    assert sim.step(w, Action.ACCELERATE).av_speed == CFG3.max_speed
    assert sim.step(w, Action.DECELERATE).av_speed == CFG3.max_speed - CFG3.av_speed_step


def test_step_does_not_mutate_input():
    w = sim.reset(ScenarioConfig(hdv_count=4), 3)
    before = (w.vehicles, w.step_count, w.time)
    sim.step(w, Action.CHANGE_LEFT)
    assert (w.vehicles, w.step_count, w.time) == before


def test_goal_and_horizon_termination():
    short = ScenarioConfig(road_length=3.0, hdv_count=0)
    assert sim.step(make_world(short, [car(0.0, 1, v=40.0, cfg=short)]), Action.KEEP_LANE).done_reason == "goal"
    brief = ScenarioConfig(max_steps=1, hdv_count=0)
    assert sim.step(make_world(brief, [car(0.0, 1, cfg=brief)]), Action.KEEP_LANE).done_reason == "horizon"


@pytest.mark.parametrize("action,delta", [(Action.CHANGE_LEFT, 1), (Action.CHANGE_RIGHT, -1)])
def test_completed_lane_change_moves_one_lane(action, delta):
    w = make_world(CFG3, [car(0.0, 1, v=25.0)])
    w = sim.step(w, action).next_state
    steps = 1
    while w.av_maneuver is not None:
        w = sim.step(w, Action.KEEP_LANE).next_state
        steps += 1
    assert w.av.lane == 1 + delta
    assert w.av.y == CFG3.lane_center(1 + delta)
    assert steps == round(CFG3.lane_change_duration / CFG3.dt)
    assert w.av.heading == 0.0


def test_edge_lane_change_is_masked():
    w = make_world(CFG3, [car(0.0, 0, v=25.0)])
    assert Action.CHANGE_RIGHT not in sim.legal_actions(w)
    out = sim.step(w, Action.CHANGE_RIGHT)
    assert not out.lane_changed and out.next_state.av_maneuver is None


def _run(cfg, seed, actions):
    w = sim.reset(cfg, seed)
    trace = []
    for a in actions:
        out = sim.step(w, a)
        trace.append(out)
        if out.done:
            break
        w = out.next_state
    return trace


@given(st.integers(0, 2**31), st.lists(st.sampled_from(list(Action)), min_size=1, max_size=60))
def test_determinism(seed, actions):
    cfg = ScenarioConfig(hdv_count=5, hdv_lane_change_prob=0.05)
    assert _run(cfg, seed, actions) == _run(cfg, seed, actions)


@given(st.integers(0, 2**31), st.lists(st.sampled_from(list(Action)), min_size=1, max_size=80))
def test_no_teleportation(seed, actions):
    cfg = ScenarioConfig(hdv_count=5, hdv_lane_change_prob=0.05)
    w = sim.reset(cfg, seed)
    for a in actions:
        out = sim.step(w, a)
        for before, after in zip(w.vehicles, out.next_state.vehicles):
            moved = math.hypot(after.x - before.x, after.y - before.y)
            assert moved <= cfg.max_speed * cfg.dt + 1e-9
        if out.done:
            break
        w = out.next_state


rect = st.builds(
    VehicleState,
    x=st.floats(-10, 10), y=st.floats(-6, 6), v=st.just(0.0),
    heading=st.floats(-1.2, 1.2), length=st.floats(1, 8), width=st.floats(0.5, 3),
)


@given(rect, rect)
def test_collision_symmetry(a, b):
    assert rectangles_intersect(a, b) == rectangles_intersect(b, a)


def _sat_oracle(a, b, samples=60):
    # dense point sampling of a inside b, and b inside a
    def inside(p, r):
        c, s = math.cos(r.heading), math.sin(r.heading)
        dx, dy = p[0] - r.x, p[1] - r.y
        u, v = c * dx + s * dy, -s * dx + c * dy
        return abs(u) <= r.length / 2 + 1e-9 and abs(v) <= r.width / 2 + 1e-9

    def points(r):
        c, s = math.cos(r.heading), math.sin(r.heading)
        for u in np.linspace(-r.length / 2, r.length / 2, samples):
            for v in (-r.width / 2, r.width / 2):
                yield r.x + c * u - s * v, r.y + s * u + c * v
        for v in np.linspace(-r.width / 2, r.width / 2, samples):
            for u in (-r.length / 2, r.length / 2):
                yield r.x + c * u - s * v, r.y + s * u + c * v

    return any(inside(p, b) for p in points(a)) or any(inside(p, a) for p in points(b))


def test_rectangle_test_against_boundary_sampling(rng):
    mismatches = 0
    for _ in range(300):
        a = VehicleState(x=0.0, y=0.0, v=0.0, heading=rng.uniform(-1.2, 1.2), length=rng.uniform(2, 6), width=2.0)
        b = VehicleState(x=rng.uniform(-7, 7), y=rng.uniform(-5, 5), v=0.0, heading=rng.uniform(-1.2, 1.2),
                         length=rng.uniform(2, 6), width=2.0)
        mismatches += rectangles_intersect(a, b) != _sat_oracle(a, b)
    # boundary sampling can only miss grazing contacts
    assert mismatches <= 3


# ---------------------------------------------------------------- gaps and selection


def test_front_gap_examples():
    w = make_world(CFG3, [car(0.0, 1), car(20.0, 1)])
    assert front_gap(w, 1) == 15.0
    assert front_gap(w, 0) is None
    w = make_world(CFG3, [car(0.0, 1), car(30.0, 1), car(12.0, 1)])
    assert front_gap(w, 1) == 12.0 - 5.0


def test_selection_alone():
    assert select_relevant_hdvs(make_world(CFG3, [car(0.0, 1)])) == []


def test_selection_tight_gap_keeps_nearest_per_adjacent_lane():
    fv, rv = car(10.0, 1), car(-5.0, 1)
    left_near, left_far = car(3.0, 2), car(40.0, 2)
    right = car(-30.0, 0)
    w = make_world(CFG3, [car(0.0, 1), fv, rv, left_near, left_far, right])
    chosen = select_relevant_hdvs(w)
    assert len(chosen) == 4
    assert {id(h) for h in chosen} == {id(fv), id(rv), id(left_near), id(right)}


def test_selection_wide_gap_keeps_everything_in_range():
    fv, rv = car(30.0, 1), car(-20.0, 1)
    adj = [car(-10.0, 2), car(15.0, 2), car(5.0, 0)]
    outside = car(60.0, 0)
    w = make_world(CFG3, [car(0.0, 1), fv, rv, *adj, outside])
    chosen = select_relevant_hdvs(w)
    assert len(chosen) == 5
    assert {id(h) for h in chosen} == {id(v) for v in (fv, rv, *adj)}


def _selection_oracle(w):
    """Direct enumeration of the rule, written independently of the library."""
    av = w.av
    keep = []
    own = sorted((h for h in w.hdvs if h.lane == av.lane), key=lambda h: h.x)
    fv = next((h for h in own if h.x > av.x), None)
    rv = next((h for h in reversed(own) if h.x <= av.x), None)
    keep += [h for h in (fv, rv) if h is not None]
    total = 0.0
    total += math.inf if fv is None else (fv.x - fv.length / 2) - (av.x + av.length / 2)
    total += math.inf if rv is None else (av.x - av.length / 2) - (rv.x + rv.length / 2)
    lo = rv.x if rv is not None else -math.inf
    hi = fv.x if fv is not None else math.inf
    for lane in (av.lane - 1, av.lane + 1):
        lane_hdvs = [h for h in w.hdvs if h.lane == lane]
        if not lane_hdvs:
            continue
        if total > 20.0:
            keep += [h for h in lane_hdvs if lo <= h.x <= hi or abs(h.y - av.y) < (h.width + av.width) / 2]
        else:
            dists = [abs(h.x - av.x) for h in lane_hdvs]
            keep.append(lane_hdvs[int(np.argmin(dists))])
    return {id(h) for h in keep}


def test_selection_matches_brute_force_on_random_worlds(rng):
    cfg = ScenarioConfig(lane_count=4, hdv_count=0)
    for _ in range(1000):
        n = rng.integers(0, 9)
        av_lane = int(rng.integers(4))
        vehicles = [car(0.0, av_lane, cfg=cfg)]
        for _ in range(n):
            vehicles.append(car(round(rng.uniform(-60, 60), 1), int(rng.integers(4)), cfg=cfg))
        w = make_world(cfg, vehicles)
        assert {id(h) for h in select_relevant_hdvs(w)} == _selection_oracle(w)


def test_substreams_are_independent_and_reproducible():
    a1 = sim.substream(7, "env").random(4)
    a2 = sim.substream(7, "env").random(4)
    b = sim.substream(7, "policy").random(4)
    c = sim.substream(8, "env").random(4)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b) and not np.array_equal(a1, c)


def test_vehicle_validation():
    with pytest.raises(ValueError):
        VehicleState(x=0.0, y=0.0, v=-1.0)
    with pytest.raises(ValueError):
        ScenarioConfig(lane_count=1)
    with pytest.raises(ValueError):
        make_world(CFG3, [replace(car(0.0, 1), lane=7)])
