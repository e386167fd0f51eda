"""Multilayer perceptrons over ParamSets, optionally with a member axis."""
from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

from . import tape as T
from .params import ParamSet

ACTIVATIONS = {"relu": T.relu, "swish": T.swish, "tanh": T.tanh}


def mlp_layout(sizes: Sequence[int], members: Optional[int] = None, layernorm: bool = False,
               prefix: str = ""):
    layout = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lead = () if members is None else (members,)
        layout.append((f"{prefix}W{i}", lead + (fan_in, fan_out)))
        bias_shape = (fan_out,) if members is None else (members, 1, fan_out)
        layout.append((f"{prefix}b{i}", bias_shape))
        if layernorm and i < len(sizes) - 2:
            layout.append((f"{prefix}ln_g{i}", bias_shape))
            layout.append((f"{prefix}ln_b{i}", bias_shape))
    return layout


def init_mlp(params: ParamSet, rng: np.random.Generator, prefix: str = "") -> ParamSet:
    """Fan-in scaled uniform init, in layout order, of every ``prefix``-ed entry."""
    for name, shape in params.layout:
        if not name.startswith(prefix):
            continue
        local = name[len(prefix):]
        if local.startswith("ln_g"):
            params[name] = 1.0
        elif local.startswith("ln_b"):
            params[name] = 0.0
        else:
            layer = local[1:]
            fan_in = params[f"{prefix}W{layer}"].shape[-2]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def make_mlp(sizes: Sequence[int], rng, members: Optional[int] = None, layernorm: bool = False,
             dtype=np.float64, seed=None) -> ParamSet:
    ps = ParamSet(mlp_layout(sizes, members, layernorm), dtype=dtype, seed=seed)
    return init_mlp(ps, rng)


def n_layers(params: Mapping, prefix: str = "") -> int:
    n = 0
    while f"{prefix}W{n}" in params:
        n += 1
    return n


def forward_mlp(params: Mapping, x, activation: str = "relu", layernorm: bool = False,
                prefix: str = ""):
    """Run an MLP on ``x``.

    ``params`` is a ParamSet (plain numpy evaluation) or the leaf mapping
    returned by ``Tape.watch`` (recorded for differentiation). With
    ``layernorm`` set, each hidden pre-activation is normalized per row
    before the learned scale/shift and the nonlinearity.
    """
    act = ACTIVATIONS[activation]
    depth = n_layers(params, prefix)
    if depth == 0:
        raise T.DimensionError(f"no layers found with prefix {prefix!r}")
    h = x
    for i in range(depth):
        W = params[f"{prefix}W{i}"]
        width_in = T._val(W).shape[-2]
        if T._val(h).shape[-1] != width_in:
            raise T.DimensionError(
                f"layer {prefix}W{i} expects input width {width_in}, got {T._val(h).shape[-1]}")
        h = T.linear(h, W, params[f"{prefix}b{i}"])
        if i < depth - 1:
            if layernorm:
                h = T.layernorm(h, params[f"{prefix}ln_g{i}"], params[f"{prefix}ln_b{i}"])
            h = act(h)
    return h
