"""Experiment orchestration: configs, the grid runner, reports, trend checks and the CLI."""

from . import checks, config
from .config import ExperimentConfig, load_config
from .presets import default_config, same_arch_config, sweep_config
from .runner import ResultRecord, read_results, report, run_experiment, sweep_budget, write_results

__all__ = [
    "checks", "config", "ExperimentConfig", "load_config", "default_config", "sweep_config", "same_arch_config",
    "ResultRecord", "read_results", "write_results", "report", "run_experiment", "sweep_budget",
]
