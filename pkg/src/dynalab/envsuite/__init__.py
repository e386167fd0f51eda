"""Analytic control tasks in Gym-style and DMC-style variants."""
from .core import (DMC, GYM, Env, EnvSpec, EnvState, EnvVariant, StateRejectedError, check_state,
                   make_spec, observation, reset, reset_to_state, step, step_batch, task_functions,
                   with_variant)
from .integrators import SimulationBlowupError, integrate
from .tasks import TASKS, tolerance

ENV_IDS = tuple(f"{t}/{s}" for t in TASKS for s in ("gym", "dmc"))

__all__ = [
    "DMC", "GYM", "Env", "EnvSpec", "EnvState", "EnvVariant", "StateRejectedError",
    "check_state", "make_spec", "observation", "reset", "reset_to_state", "step", "step_batch",
    "task_functions", "with_variant", "SimulationBlowupError", "integrate", "TASKS",
    "tolerance", "ENV_IDS",
]
