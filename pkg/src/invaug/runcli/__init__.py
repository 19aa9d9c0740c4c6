"""Experiment harness: declarative configs, phased runner, tables and plots."""

from .config import ConfigError, RunConfig, load_config
from .runner import PhaseFailure, Runner, run_grid

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "PhaseFailure",
    "Runner",
    "run_grid",
]
