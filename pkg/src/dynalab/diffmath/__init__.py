"""Array math with reverse-mode gradients, MLP layers, distributions and Adam."""
from .adam import AdamState, adam_step
from .nn import forward_mlp, init_mlp, make_mlp, mlp_layout
from .params import ParamSet, polyak_update
from .serialize import FormatError, load_arrays, load_params, save_arrays, save_params
from .tape import (ContractError, DimensionError, Node, Tape, backward, gaussian_nll,
                   squashed_gaussian_sample)

__all__ = [
    "AdamState", "adam_step", "forward_mlp", "init_mlp", "make_mlp", "mlp_layout",
    "ParamSet", "polyak_update", "FormatError", "load_arrays", "load_params",
    "save_arrays", "save_params", "ContractError", "DimensionError", "Node", "Tape",
    "backward", "gaussian_nll", "squashed_gaussian_sample",
]
