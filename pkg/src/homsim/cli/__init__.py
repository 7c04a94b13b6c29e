"""Command-line interface: configuration, file formats and commands."""

from .config import ExperimentConfig
from .main import main

__all__ = ["ExperimentConfig", "main"]
