"""Dyna-style model-based RL laboratory: MBPO, SAC, dynamics ensembles and diagnostics."""
__version__ = "0.1.0"
