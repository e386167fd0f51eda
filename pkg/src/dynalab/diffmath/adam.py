from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamSet
from .tape import DimensionError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.5e-4
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamSet, **kwargs) -> "AdamState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat), **kwargs)

    def reset(self) -> None:
        self.m[...] = 0.0
        self.v[...] = 0.0
        self.step = 0


def adam_step(state: AdamState, params: ParamSet, grads: ParamSet):
    """One bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    if grads.layout != params.layout or state.m.shape != params.flat.shape:
        raise DimensionError("gradient/moment layout does not match parameters")
    g = grads.flat
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    sq = g * g
    sq *= 1.0 - b2
    state.v += sq
    # reuse the temporary for the bias-corrected denominator
    np.divide(state.v, 1.0 - b2 ** state.step, out=sq)
    np.sqrt(sq, out=sq)
    sq += state.eps
    m_hat = state.m / (1.0 - b1 ** state.step)
    m_hat *= state.lr
    m_hat /= sq
    params.flat -= m_hat
    return params, state
