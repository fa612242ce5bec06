"""Adversarial traffic scenario generation with guided latent diffusion."""

from .closed_loop import EventLog, SimulationResult, run_closed_loop
from .config import ConfigError, RunConfig
from .diffusion import DenoiserHyper, DenoiserParams, build_schedule, ddim_step, ddim_timesteps, forward_noise
from .estimators import AdversarialScenarioGenerator, LatentDiffusion, TrafficVAE
from .generation import GenerationResult, generate
from .guidance import GuidanceConfig, composite_objective, guided_noise
from .metrics import MetricsReport, compute_metrics
from .planner import PlannerConfig, plan_ego
from .scene import Agent, SceneMap, Scenario, read_scenario, write_scenario
from .selection import FeasibilityLimits, SelectionConfig, feasibility, select_best
from .synthetic import GeneratorConfig, generate_synthetic_scenario

__version__ = "0.1.0"

__all__ = [
    "Agent",
    "AdversarialScenarioGenerator",
    "ConfigError",
    "DenoiserHyper",
    "DenoiserParams",
    "EventLog",
    "FeasibilityLimits",
    "GenerationResult",
    "GeneratorConfig",
    "GuidanceConfig",
    "LatentDiffusion",
    "MetricsReport",
    "PlannerConfig",
    "RunConfig",
    "SceneMap",
    "Scenario",
    "SelectionConfig",
    "SimulationResult",
    "TrafficVAE",
    "build_schedule",
    "composite_objective",
    "compute_metrics",
    "ddim_step",
    "ddim_timesteps",
    "feasibility",
    "forward_noise",
    "generate",
    "generate_synthetic_scenario",
    "guided_noise",
    "plan_ego",
    "read_scenario",
    "run_closed_loop",
    "select_best",
    "write_scenario",
]
