"""Solver and analysis toolkit for a common-noise mean-field growth game."""

__version__ = "0.1.0"

from .model import ModelParams

__all__ = ["ModelParams", "__version__"]
