"""Drone-assisted federated learning: bound evaluation, placement, and
trajectory optimization over lossy air-to-ground links."""

__version__ = "0.1.0"

from .core import (DeviceState, InfeasibleError, LearningConstants,
                   RadioEnvironment, Scenario, ScenarioError, SkyfedError,
                   Trajectory, UnboundedError, device_positions,
                   parse_scenario, psnr_to_variance, seeded_rng,
                   serialize_scenario)

__all__ = [
    "DeviceState", "InfeasibleError", "LearningConstants", "RadioEnvironment",
    "Scenario", "ScenarioError", "SkyfedError", "Trajectory", "UnboundedError",
    "device_positions", "parse_scenario", "psnr_to_variance", "seeded_rng",
    "serialize_scenario", "__version__",
]
