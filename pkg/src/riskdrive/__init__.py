"""Risk-field observations, attention actor-critic PPO and a lane-change safety gate for highway driving."""

__version__ = "0.1.0"
