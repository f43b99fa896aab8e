"""Keyed drifting planner: one-step trajectory generation for receding-horizon control."""

__version__ = "0.1.0"
