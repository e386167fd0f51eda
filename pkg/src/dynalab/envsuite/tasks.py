"""Analytic task definitions.

Every function here is vectorized over leading batch axes so that the
environment and the perfect-model oracle share one code path.

Angles are measured from upright (``theta = 0`` is the inverted position).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np


def tolerance(x, lower, upper, margin, sigmoid="gaussian", value_at_margin=0.1):
    """Smooth indicator of ``lower <= x <= upper`` decaying to ``value_at_margin`` at ``margin``.

    Returns 1 inside the bounds and a value in ``[0, 1)`` outside.
    """
    x = np.asarray(x, dtype=float)
    inside = (x >= lower) & (x <= upper)
    d = np.where(x < lower, lower - x, x - upper) / margin
    if sigmoid == "gaussian":
        scale = math.sqrt(-2.0 * math.log(value_at_margin))
        outside = np.exp(-0.5 * (d * scale) ** 2)
    elif sigmoid == "quadratic":
        scale = math.sqrt(1.0 - value_at_margin)
        outside = np.clip(1.0 - (d * scale) ** 2, 0.0, 1.0)
    else:
        raise ValueError(f"unknown sigmoid {sigmoid!r}")
    return np.where(inside, 1.0, outside)


def _angle(cos, sin):
    return np.arctan2(sin, cos)


@dataclass(frozen=True)
class Task:
    name: str
    obs_dim: int
    act_dim: int
    state_dim: int
    action_bound: tuple
    state_bound: tuple
    constants: Dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------- pendulum

PENDULUM = Task(
    name="pendulum", obs_dim=3, act_dim=1, state_dim=2,
    action_bound=(5.0,),
    state_bound=(1e4, 100.0),
    constants={"mass": 1.0, "length": 1.0, "gravity": 9.81, "damping": 0.5},
)


def pendulum_dynamics(c):
    g_over_l = c["gravity"] / c["length"]
    inertia = c["mass"] * c["length"] ** 2
    damping = c["damping"]

    def f(x, u):
        theta, omega = x[..., 0], x[..., 1]
        alpha = g_over_l * np.sin(theta) + (u[..., 0] - damping * omega) / inertia
        return np.stack([omega, alpha], axis=-1)

    return f


def pendulum_obs(x):
    return np.stack([np.cos(x[..., 0]), np.sin(x[..., 0]), x[..., 1]], axis=-1)


def pendulum_state(obs):
    return np.stack([_angle(obs[..., 0], obs[..., 1]), obs[..., 2]], axis=-1)


def pendulum_init(rng, style):
    # angle uniform on (-pi, pi], angular velocity uniform on [-1, 1]
    theta = -rng.uniform(-math.pi, math.pi)
    return np.array([theta, rng.uniform(-1.0, 1.0)])


def pendulum_reward(obs, u, style):
    cos, omega = obs[..., 0], obs[..., 2]
    if style == "normalized_unit":
        return tolerance(cos, 0.95, 1.0, margin=1.0)
    return 1.0 + (1.0 + cos) - 0.01 * u[..., 0] ** 2 - 0.005 * np.minimum(omega ** 2, 64.0)


def pendulum_terminal(obs):
    return np.abs(obs[..., 2]) > 8.0


# ---------------------------------------------------------------- cart-pole

CARTPOLE = Task(
    name="cartpole", obs_dim=5, act_dim=1, state_dim=4,
    action_bound=(10.0,),
    state_bound=(100.0, 1e4, 100.0, 100.0),
    constants={"cart_mass": 1.0, "pole_mass": 0.1, "half_length": 0.5, "gravity": 9.81,
               "damping": 0.1},
)


def cartpole_dynamics(c):
    mc, mp, l, g, b = (c["cart_mass"], c["pole_mass"], c["half_length"], c["gravity"],
                       c["damping"])
    total = mc + mp

    def f(x, u):
        xdot, theta, thdot = x[..., 2], x[..., 1], x[..., 3]
        sin, cos = np.sin(theta), np.cos(theta)
        force = u[..., 0] - b * xdot
        temp = (force + mp * l * thdot ** 2 * sin) / total
        thacc = (g * sin - cos * temp) / (l * (4.0 / 3.0 - mp * cos ** 2 / total))
        xacc = temp - mp * l * thacc * cos / total
        return np.stack([xdot, thdot, xacc, thacc], axis=-1)

    return f


def cartpole_obs(x):
    return np.stack([x[..., 0], np.cos(x[..., 1]), np.sin(x[..., 1]), x[..., 2], x[..., 3]], axis=-1)


def cartpole_state(obs):
    return np.stack([obs[..., 0], _angle(obs[..., 1], obs[..., 2]), obs[..., 3], obs[..., 4]], axis=-1)


def cartpole_init(rng, style):
    if style == "unnormalized":
        # balance start near upright, as in the Gym task family
        return rng.uniform(-0.05, 0.05, size=4)
    x = np.array([0.0, math.pi, 0.0, 0.0])
    return x + 0.01 * rng.standard_normal(4)


def cartpole_reward(obs, u, style):
    x, cos, thdot = obs[..., 0], obs[..., 1], obs[..., 4]
    if style == "normalized_unit":
        upright = (cos + 1.0) / 2.0
        centered = (1.0 + tolerance(x, 0.0, 0.0, margin=2.0)) / 2.0
        small_control = (4.0 + tolerance(u[..., 0] / 10.0, 0.0, 0.0, margin=1.0,
                                         sigmoid="quadratic", value_at_margin=0.0)) / 5.0
        small_velocity = (1.0 + tolerance(thdot, 0.0, 0.0, margin=5.0)) / 2.0
        return upright * centered * small_control * small_velocity
    return 1.0 + cos


def cartpole_terminal(obs):
    theta = _angle(obs[..., 1], obs[..., 2])
    return (np.abs(obs[..., 0]) > 2.4) | (np.abs(theta) > 0.2)


# ---------------------------------------------------------------- point mass

POINTMASS = Task(
    name="pointmass", obs_dim=4, act_dim=2, state_dim=4,
    action_bound=(1.0, 1.0),
    state_bound=(10.0, 10.0, 100.0, 100.0),
    constants={"gain": 10.0, "damping": 1.0, "box": 0.3, "target_radius": 0.02},
)


def pointmass_dynamics(c):
    gain, damping = c["gain"], c["damping"]

    def f(x, u):
        v = x[..., 2:]
        return np.concatenate([v, gain * u - damping * v], axis=-1)

    return f


def pointmass_obs(x):
    return np.array(x, dtype=float, copy=True)


def pointmass_state(obs):
    return np.array(obs, dtype=float, copy=True)


def pointmass_init(rng, style):
    box = POINTMASS.constants["box"]
    return np.concatenate([rng.uniform(-box, box, size=2), np.zeros(2)])


def pointmass_reward(obs, u, style):
    dist = np.sqrt(obs[..., 0] ** 2 + obs[..., 1] ** 2)
    if style == "normalized_unit":
        radius = POINTMASS.constants["target_radius"]
        near = tolerance(dist, 0.0, radius, margin=0.1)
        control = tolerance(u, 0.0, 0.0, margin=1.0, sigmoid="quadratic", value_at_margin=0.0)
        return near * (4.0 + control.mean(axis=-1)) / 5.0
    return 1.0 + (1.0 - np.minimum(dist, 1.0)) - 0.1 * np.sum(u ** 2, axis=-1)


def pointmass_terminal(obs):
    return (np.abs(obs[..., 0]) > 0.5) | (np.abs(obs[..., 1]) > 0.5)


@dataclass(frozen=True)
class TaskFunctions:
    task: Task
    dynamics: Callable
    observation: Callable
    state_from_observation: Callable
    initial_state: Callable
    reward: Callable
    terminal: Callable


TASKS = {
    "pendulum": TaskFunctions(PENDULUM, pendulum_dynamics, pendulum_obs, pendulum_state,
                              pendulum_init, pendulum_reward, pendulum_terminal),
    "cartpole": TaskFunctions(CARTPOLE, cartpole_dynamics, cartpole_obs, cartpole_state,
                              cartpole_init, cartpole_reward, cartpole_terminal),
    "pointmass": TaskFunctions(POINTMASS, pointmass_dynamics, pointmass_obs, pointmass_state,
                               pointmass_init, pointmass_reward, pointmass_terminal),
}
