from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from ..diffmath.serialize import dumps, loads
from .integrators import SimulationBlowupError, integrate
from .tasks import TASKS, TaskFunctions

REWARD_STYLES = ("unnormalized", "normalized_unit")
TERMINATIONS = ("early_termination", "fixed_horizon")


class StateRejectedError(ValueError):
    """``reset_to_state`` was given a non-finite or out-of-bounds state."""


@dataclass(frozen=True)
class EnvSpec:
    task_id: str
    obs_dim: int
    act_dim: int
    action_bound: Tuple[float, ...]
    constants: Dict[str, float]
    dt: float
    state_dim: int
    state_bound: Tuple[float, ...]

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise ValueError("obs_dim and act_dim must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if len(self.action_bound) != self.act_dim or not np.all(np.isfinite(self.action_bound)):
            raise ValueError("action bounds must be finite, one per action dimension")


@dataclass(frozen=True)
class EnvVariant:
    reward_style: str
    termination: str
    horizon: int
    integrator: str
    damping: Optional[float] = None

    def __post_init__(self):
        if self.reward_style not in REWARD_STYLES:
            raise ValueError(f"reward_style must be one of {REWARD_STYLES}")
        if self.termination not in TERMINATIONS:
            raise ValueError(f"termination must be one of {TERMINATIONS}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


GYM = EnvVariant("unnormalized", "early_termination", 1000, "rk4")
DMC = EnvVariant("normalized_unit", "fixed_horizon", 1000, "semi_implicit_euler")
VARIANTS = {"gym": (GYM, 0.008), "dmc": (DMC, 0.01)}


@dataclass
class EnvState:
    physical: np.ndarray
    step: int = 0
    n_clipped: int = 0

    def copy(self) -> "EnvState":
        return EnvState(self.physical.copy(), self.step, self.n_clipped)

    def to_bytes(self) -> bytes:
        return dumps({"physical": self.physical, "step": np.array([self.step]),
                      "n_clipped": np.array([self.n_clipped])})

    @classmethod
    def from_bytes(cls, data: bytes) -> "EnvState":
        a = loads(data)
        return cls(a["physical"], int(a["step"][0]), int(a["n_clipped"][0]))


def task_functions(spec: EnvSpec) -> TaskFunctions:
    return TASKS[spec.task_id.split("/")[0]]


def _constants(spec: EnvSpec, variant: EnvVariant) -> Dict[str, float]:
    if variant.damping is None:
        return spec.constants
    return {**spec.constants, "damping": variant.damping}


def make_spec(env_id: str) -> Tuple[EnvSpec, EnvVariant]:
    """Resolve ids such as ``"pendulum/dmc"`` into a spec/variant pair."""
    try:
        task_name, style = env_id.split("/")
        fns = TASKS[task_name]
        variant, dt = VARIANTS[style]
    except (ValueError, KeyError):
        raise ValueError(f"unknown environment id {env_id!r}; expected <task>/<gym|dmc> with "
                         f"task in {sorted(TASKS)}") from None
    t = fns.task
    spec = EnvSpec(env_id, t.obs_dim, t.act_dim, t.action_bound, dict(t.constants), dt,
                   t.state_dim, t.state_bound)
    return spec, variant


def observation(spec: EnvSpec, state: EnvState) -> np.ndarray:
    return task_functions(spec).observation(state.physical)


def reset(spec: EnvSpec, variant: EnvVariant, seed) -> Tuple[EnvState, np.ndarray]:
    rng = np.random.default_rng(seed)
    fns = task_functions(spec)
    state = EnvState(np.asarray(fns.initial_state(rng, variant.reward_style), dtype=float))
    return state, fns.observation(state.physical)


def check_state(spec: EnvSpec, physical) -> None:
    x = np.asarray(physical, dtype=float)
    if x.shape[-1] != spec.state_dim:
        raise StateRejectedError(f"state has {x.shape[-1]} entries, expected {spec.state_dim}")
    if not np.all(np.isfinite(x)):
        raise StateRejectedError("state is not finite")
    if np.any(np.abs(x) > np.asarray(spec.state_bound)):
        raise StateRejectedError(f"state {x} outside bounds {spec.state_bound}")


def reset_to_state(spec: EnvSpec, variant: EnvVariant, state: EnvState) -> np.ndarray:
    """Accept an arbitrary in-bounds state; stepping from it matches organic stepping."""
    check_state(spec, state.physical)
    if not 0 <= state.step <= variant.horizon:
        raise StateRejectedError(f"step counter {state.step} outside [0, {variant.horizon}]")
    return observation(spec, state)


def step_batch(spec: EnvSpec, variant: EnvVariant, physical: np.ndarray, action: np.ndarray,
               check: bool = True):
    """Advance a batch of physical states by one step.

    Returns ``(next_physical, next_obs, reward, terminated, n_clipped_rows)``.
    Actions are clipped to the spec bounds. With ``check=False`` rows that
    blow up come back non-finite rather than raising.
    """
    fns = task_functions(spec)
    bound = np.asarray(spec.action_bound)
    action = np.asarray(action, dtype=float)
    clipped = np.clip(action, -bound, bound)
    n_clipped = int(np.any(clipped != action, axis=-1).sum())
    nxt = integrate(fns.dynamics(_constants(spec, variant)), physical, clipped, spec.dt,
                    variant.integrator, check=check)
    obs = fns.observation(nxt)
    reward = fns.reward(obs, clipped, variant.reward_style)
    if variant.termination == "early_termination":
        terminated = fns.terminal(obs)
    else:
        terminated = np.zeros(obs.shape[:-1], dtype=bool)
    return nxt, obs, reward, terminated, n_clipped


def step(spec: EnvSpec, variant: EnvVariant, state: EnvState, action):
    """One environment step: ``(next_state, obs, reward, terminated, truncated)``."""
    try:
        nxt, obs, reward, term, n_clip = step_batch(
            spec, variant, state.physical[None], np.asarray(action, dtype=float).reshape(1, -1))
    except SimulationBlowupError as exc:
        raise SimulationBlowupError(str(exc), state.copy()) from exc
    new = EnvState(nxt[0], state.step + 1, state.n_clipped + n_clip)
    terminated = bool(term[0])
    truncated = new.step >= variant.horizon and not terminated
    return new, obs[0], float(reward[0]), terminated, truncated


@dataclass
class Env:
    """Convenience wrapper holding a spec/variant pair and a current state."""

    env_id: str
    spec: EnvSpec = field(init=False)
    variant: EnvVariant = field(init=False)
    state: Optional[EnvState] = field(init=False, default=None)

    def __post_init__(self):
        self.spec, self.variant = make_spec(self.env_id)

    @property
    def obs_dim(self) -> int:
        return self.spec.obs_dim

    @property
    def act_dim(self) -> int:
        return self.spec.act_dim

    @property
    def action_scale(self) -> np.ndarray:
        return np.asarray(self.spec.action_bound, dtype=float)

    def reset(self, seed) -> np.ndarray:
        self.state, obs = reset(self.spec, self.variant, seed)
        return obs

    def reset_to_state(self, state: EnvState) -> np.ndarray:
        obs = reset_to_state(self.spec, self.variant, state)
        self.state = state.copy()
        return obs

    def step(self, action):
        self.state, obs, r, term, trunc = step(self.spec, self.variant, self.state, action)
        return obs, r, term, trunc

    def state_from_observation(self, obs) -> np.ndarray:
        return task_functions(self.spec).state_from_observation(np.asarray(obs, dtype=float))

    def terminal(self, obs) -> np.ndarray:
        if self.variant.termination != "early_termination":
            return np.zeros(np.asarray(obs).shape[:-1], dtype=bool)
        return task_functions(self.spec).terminal(np.asarray(obs))


def with_variant(env_id: str, **changes) -> Tuple[EnvSpec, EnvVariant]:
    spec, variant = make_spec(env_id)
    return spec, replace(variant, **changes)
