"""Rehearsal-free federated class-incremental learning with composed prompts."""

from .config import ExperimentConfig, parse_config
from .fed import run_experiment

__all__ = ["ExperimentConfig", "parse_config", "run_experiment"]
__version__ = "0.1.0"
