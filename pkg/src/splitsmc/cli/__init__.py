"""Command-line interface and experiment runner."""

from .commands import run_experiment
from .config import ExperimentConfig, dump_config, load_config, parse_config
from .main import main

__all__ = ["ExperimentConfig", "dump_config", "load_config", "main", "parse_config", "run_experiment"]
