"""Episode-level environment: simulator + observation rasters + optional safety gate."""

from __future__ import annotations

from collections import Counter

import numpy as np

from . import sim
from .risk import GridSpec, RiskParams, hybrid_risk, rasterize
from .safety import SafetyConfig, gate_action
from .sim import Action, ScenarioConfig


class DrivingEnv:
    """Auto-seeding wrapper around :mod:`riskdrive.sim`.

    Each ``reset`` draws the next episode seed from the ``episodes`` substream
    of the root seed, so a run is fully determined by that one integer.
    """

    def __init__(
        self,
        scenario: ScenarioConfig,
        risk: RiskParams,
        grid: GridSpec,
        safety: SafetyConfig,
        *,
        risk_observation: bool = True,
        safety_filter: bool = True,
        seed: int = 0,
    ):
        self.scenario = scenario
        self.risk = risk
        self.grid = grid
        self.safety = safety
        self.risk_observation = risk_observation
        self.safety_filter = safety_filter
        self._episode_rng = sim.substream(seed, "episodes")
        self.world: sim.World | None = None
        self.counters: Counter = Counter()

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return 3, self.grid.height_cells, self.grid.width_cells

    def reset(self, episode_seed: int | None = None) -> np.ndarray:
        if episode_seed is None:
            episode_seed = int(self._episode_rng.integers(2**63))
        self.world = sim.reset(self.scenario, episode_seed)
        return self.observe()

    def observe(self) -> np.ndarray:
        frame = rasterize(self.world, self.risk, self.grid)
        obs = frame.to_array(self.scenario.max_speed)
        if self.risk_observation:
            self.counters["risk_raster"] += 1
        else:
            obs[1] = 0.0
        return obs

    def aggregated_risk(self) -> float:
        return hybrid_risk(self.world.av, sim.select_relevant_hdvs(self.world), self.risk)

    def step(self, proposed: Action):
        """Returns (obs, outcome, executed action, overridden flag)."""
        if self.world is None:
            raise sim.LifecycleError("reset() must be called before step()")
        action = Action(proposed)
        overridden = False
        if self.safety_filter:
            self.counters["gate"] += 1
            action, overridden = gate_action(self.world, action, self.safety)
        elif not sim.is_executable(self.world, action):
            action = Action.KEEP_LANE
        outcome = sim.step(self.world, action)
        self.world = outcome.next_state
        return self.observe(), outcome, action, overridden
