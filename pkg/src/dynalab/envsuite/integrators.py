"""Fixed-step integrators for ``x' = f(x, u)`` with ``x = [positions, velocities]``."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

Dynamics = Callable[[np.ndarray, np.ndarray], np.ndarray]

METHODS = ("rk4", "semi_implicit_euler", "euler")


class SimulationBlowupError(FloatingPointError):
    """Integration produced a non-finite state; ``state`` holds the offending input."""

    def __init__(self, message: str, state):
        super().__init__(message)
        self.state = state


def _check(x, state, stage):
    if state is not None and not np.all(np.isfinite(x)):
        raise SimulationBlowupError(f"non-finite value during {stage}", state)
    return x


def integrate(dynamics: Dynamics, state, control, dt: float, method: str = "rk4",
              n_position: Optional[int] = None, check: bool = True) -> np.ndarray:
    """Advance ``state`` by one step of length ``dt``.

    ``semi_implicit_euler`` updates velocities first and then positions with
    the new velocities; the first ``n_position`` entries of the last axis are
    positions (default: half the state). With no position entries it reduces
    to explicit Euler. With ``check=False`` non-finite rows are returned
    instead of raising, for batched callers that filter them.
    """
    x = np.asarray(state)
    u = np.asarray(control)
    with np.errstate(over="ignore", invalid="ignore"):
        if not check:
            return _advance(dynamics, x, u, dt, method, n_position, None)
        return _check(_advance(dynamics, x, u, dt, method, n_position, state), state, method)


def _advance(dynamics, x, u, dt, method, n_position, state):
    if method == "rk4":
        k1 = _check(dynamics(x, u), state, "rk4 stage 1")
        k2 = _check(dynamics(x + 0.5 * dt * k1, u), state, "rk4 stage 2")
        k3 = _check(dynamics(x + 0.5 * dt * k2, u), state, "rk4 stage 3")
        k4 = _check(dynamics(x + dt * k3, u), state, "rk4 stage 4")
        out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    elif method == "semi_implicit_euler":
        n = x.shape[-1] // 2 if n_position is None else n_position
        deriv = _check(dynamics(x, u), state, "acceleration")
        v = x[..., n:] + dt * deriv[..., n:]
        if n == 0:
            out = v
        else:
            q = x[..., :n] + dt * v[..., :n]
            out = np.concatenate([q, v], axis=-1)
    elif method == "euler":
        out = x + dt * _check(dynamics(x, u), state, "derivative")
    else:
        raise ValueError(f"unknown integrator {method!r}; expected one of {METHODS}")
    return out
