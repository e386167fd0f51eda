"""Tape-free MLP forward/backward for the training hot paths.

These kernels compute the same quantities as the recorded ops in
:mod:`.tape` but keep per-layer caches explicitly and write gradients
straight into a gradient ParamSet. The tape remains the reference; the test
suite checks the two against each other.
"""
from __future__ import annotations

from typing import List, Mapping, Optional

import numpy as np

from .nn import n_layers
from .tape import DimensionError


class MLPCache:
    __slots__ = ("inputs", "pre", "post", "xhat", "inv", "sig")

    def __init__(self):
        self.inputs: List[np.ndarray] = []
        self.pre: List[np.ndarray] = []
        self.post: List[np.ndarray] = []
        self.xhat: List[Optional[np.ndarray]] = []
        self.inv: List[Optional[np.ndarray]] = []
        self.sig: List[Optional[np.ndarray]] = []


def mlp_forward(params: Mapping, x: np.ndarray, activation: str = "relu",
                layernorm: bool = False, prefix: str = "", cache: Optional[MLPCache] = None,
                eps: float = 1e-8) -> np.ndarray:
    """Evaluate the MLP; fill ``cache`` for :func:`mlp_backward` when given."""
    depth = n_layers(params, prefix)
    h = x
    for i in range(depth):
        W = params[f"{prefix}W{i}"]
        if h.shape[-1] != W.shape[-2]:
            raise DimensionError(
                f"layer {prefix}W{i} expects input width {W.shape[-2]}, got {h.shape[-1]}")
        if cache is not None:
            cache.inputs.append(h)
        z = h @ W
        z += params[f"{prefix}b{i}"]
        if i == depth - 1:
            h = z
            break
        xhat = inv = sig = None
        if layernorm:
            z -= z.mean(axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt((z * z).mean(axis=-1, keepdims=True) + eps)
            xhat = z * inv
            z = xhat * params[f"{prefix}ln_g{i}"]
            z += params[f"{prefix}ln_b{i}"]
        if activation == "relu":
            h = np.maximum(z, 0.0)
        elif activation == "swish":
            # logistic via tanh: one temporary, and tanh is far cheaper than expit
            sig = np.multiply(z, 0.5)
            np.tanh(sig, out=sig)
            sig *= 0.5
            sig += 0.5
            h = z * sig
        elif activation == "tanh":
            h = np.tanh(z)
        else:
            raise ValueError(f"unknown activation {activation!r}")
        if cache is not None:
            cache.pre.append(z)
            cache.post.append(h)
            cache.xhat.append(xhat)
            cache.inv.append(inv)
            cache.sig.append(sig)
    return h


def mlp_backward(params: Mapping, cache: MLPCache, g: np.ndarray, activation: str = "relu",
                 layernorm: bool = False, prefix: str = "", grads: Optional[Mapping] = None,
                 need_input: bool = False) -> Optional[np.ndarray]:
    """Backpropagate ``g = dL/d output`` through a cached forward pass.

    Parameter gradients are accumulated into ``grads`` when given. Returns
    the gradient with respect to the network input if ``need_input``; for a
    shared 2-D input feeding stacked members it is summed over members.
    """
    depth = len(cache.inputs)
    for i in range(depth - 1, -1, -1):
        if i < depth - 1:
            if activation == "relu":
                g = g * (cache.post[i] > 0).astype(g.dtype)
            elif activation == "swish":
                s = cache.sig[i]
                g = g * (s + cache.post[i] * (1.0 - s))
            else:
                g = g * (1.0 - cache.post[i] * cache.post[i])
            if layernorm:
                xhat = cache.xhat[i]
                if grads is not None:
                    grads[f"{prefix}ln_g{i}"] += _reduce_rows(g * xhat)
                    grads[f"{prefix}ln_b{i}"] += _reduce_rows(g)
                gh = g * params[f"{prefix}ln_g{i}"]
                g = cache.inv[i] * (gh - gh.mean(axis=-1, keepdims=True)
                                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        x = cache.inputs[i]
        W = params[f"{prefix}W{i}"]
        if grads is not None:
            if W.ndim == 2:
                grads[f"{prefix}W{i}"] += x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                grads[f"{prefix}W{i}"] += np.swapaxes(x, -1, -2) @ g
            grads[f"{prefix}b{i}"] += _reduce_rows(g)
        if i == 0 and not need_input:
            return None
        g = g @ np.swapaxes(W, -1, -2)
        if g.ndim > x.ndim:
            g = g.sum(axis=0)
    return g


def _reduce_rows(g: np.ndarray) -> np.ndarray:
    """Sum over the row axis; keeps the ``(M, 1, out)`` shape of stacked biases."""
    # a ones-vector product is several times faster than sum() over a strided axis
    ones = np.ones((1, g.shape[-2]), dtype=g.dtype)
    if g.ndim == 2:
        return (ones @ g)[0]
    return ones @ g
