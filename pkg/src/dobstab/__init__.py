"""Disturbance-observer robust motion control with numerical stability checks."""

from dobstab._backend import BACKEND
from dobstab.analysis import AnalysisConfig, analyze
from dobstab.bounds import BetaConstants, WorkspaceBox, estimate_betas, ultimate_bound_gamma
from dobstab.controller import ControllerConfig, control_torque
from dobstab.dynamics import (
    ConfigurationError,
    DegenerateConfigurationError,
    JointState,
    LinkParams,
    ManipulatorModel,
    table_i_model,
)
from dobstab.reference import Reference, operational_to_joint, reference_sample
from dobstab.scenario import PRESETS, Scenario, ScenarioError, load
from dobstab.simulation import DisturbanceSchedule, RunLog, SimConfig, run_scenario

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AnalysisConfig",
    "BetaConstants",
    "ConfigurationError",
    "ControllerConfig",
    "DegenerateConfigurationError",
    "DisturbanceSchedule",
    "JointState",
    "LinkParams",
    "ManipulatorModel",
    "PRESETS",
    "Reference",
    "RunLog",
    "Scenario",
    "ScenarioError",
    "SimConfig",
    "WorkspaceBox",
    "analyze",
    "control_torque",
    "estimate_betas",
    "load",
    "operational_to_joint",
    "reference_sample",
    "run_scenario",
    "table_i_model",
    "ultimate_bound_gamma",
]
