"""Experiment configuration, runners, metrics and the command-line entry point."""

from .config import ExperimentConfig, load_config
from .experiments import MetricRow, run_experiment
from .metrics import completion_rate, fit_weak_order, nmse, weak_error

__all__ = ["ExperimentConfig", "load_config", "MetricRow", "run_experiment",
           "completion_rate", "fit_weak_order", "nmse", "weak_error"]
