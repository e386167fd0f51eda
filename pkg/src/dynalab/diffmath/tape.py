"""Minimal reverse-mode differentiation over numpy arrays.

Operations accept either plain ``ndarray`` values or :class:`Node` objects.
When no argument is a node the operation is plain numpy and nothing is
recorded, so the same network code serves both the training path (with a
tape) and the fast inference path (without one).
"""
from __future__ import annotations

import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .params import ParamSet

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


class ContractError(ValueError):
    """Raised when an operation is called outside its contract."""


class DimensionError(ValueError):
    """Raised on incompatible array shapes."""


class Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "tape", "leaf_grad")

    def __init__(self, value, parents=(), vjp=None, tape=None, requires_grad=False, leaf_grad=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.tape = tape
        self.requires_grad = requires_grad
        self.leaf_grad = leaf_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records operations so that :func:`backward` can replay them in reverse."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._watched: List[Tuple[ParamSet, ParamSet]] = []

    def watch(self, params: ParamSet) -> dict:
        """Register ``params`` as differentiable leaves; returns ``name -> Node``."""
        grads = params.zeros_like()
        self._watched.append((params, grads))
        leaves = {}
        for name in params:
            node = Node(params[name], tape=self, requires_grad=True, leaf_grad=grads[name])
            self.nodes.append(node)
            leaves[name] = node
        return leaves

    def constant(self, value) -> Node:
        return Node(np.asarray(value), tape=self)

    def record(self, value, parents, vjp) -> Node:
        node = Node(value, tuple(parents), vjp, tape=self, requires_grad=True)
        self.nodes.append(node)
        return node


def _val(x):
    return x.value if isinstance(x, Node) else x


def _active(*xs) -> Optional[Tape]:
    for x in xs:
        if isinstance(x, Node) and x.requires_grad:
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(tape: Tape, loss: Node):
    """Gradients of scalar ``loss`` for every ParamSet watched on ``tape``.

    Returns the gradient ParamSet directly when one set is watched, otherwise
    a tuple in watch order. Unused parameters get exact zeros.
    """
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise ContractError("loss was not produced on this tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    for _, g in tape._watched:
        g.flat[...] = 0.0
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.leaf_grad is not None:
            node.leaf_grad += _unbroadcast(g, node.leaf_grad.shape)
            continue
        needs = tuple(isinstance(p, Node) and p.requires_grad for p in node.parents)
        parent_grads = node.vjp(g, needs)
        for p, gp, need in zip(node.parents, parent_grads, needs):
            if not need:
                continue
            gp = _unbroadcast(gp, p.value.shape)
            key = id(p)
            prev = grads.get(key)
            grads[key] = gp if prev is None else prev + gp
    out = tuple(g for _, g in tape._watched)
    return out[0] if len(out) == 1 else out


# ---------------------------------------------------------------- elementwise

def add(a, b):
    out = _val(a) + _val(b)
    tape = _active(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g, n: (g, g))


def sub(a, b):
    out = _val(a) - _val(b)
    tape = _active(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g, n: (g, -g if n[1] else None))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    tape = _active(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g, n: (g * bv if n[0] else None, g * av if n[1] else None))


def neg(a):
    out = -_val(a)
    tape = _active(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g, n: (-g,))


def square(a):
    av = _val(a)
    out = av * av
    tape = _active(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g, n: (2.0 * g * av,))


def exp(a):
    out = np.exp(_val(a))
    tape = _active(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g, n: (g * out,))


def log(a):
    av = _val(a)
    out = np.log(av)
    tape = _active(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g, n: (g / av,))


def tanh(a):
    out = np.tanh(_val(a))
    tape = _active(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g, n: (g * (1.0 - out * out),))


def relu(a):
    av = _val(a)
    out = np.maximum(av, 0.0)
    tape = _active(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g, n: (g * (av > 0),))


def sigmoid(a):
    out = expit(_val(a))
    tape = _active(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g, n: (g * out * (1.0 - out),))


def swish(a):
    av = _val(a)
    s = expit(av)
    out = av * s
    tape = _active(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g, n: (g * (s + out * (1.0 - s)),))


def softplus(a):
    av = _val(a)
    out = np.logaddexp(0.0, av)
    tape = _active(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g, n: (g * expit(av),))


def minimum(a, b):
    av, bv = _val(a), _val(b)
    out = np.minimum(av, bv)
    tape = _active(a, b)
    if tape is None:
        return out
    pick_a = av <= bv

    def vjp(g, n):
        return (g * pick_a if n[0] else None, g * ~pick_a if n[1] else None)

    return tape.record(out, (a, b), vjp)


# ---------------------------------------------------------------- reductions / shape

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = _val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    tape = _active(a)
    if tape is None:
        return out

    def vjp(g, n):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return tape.record(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = _val(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def getitem(a, index):
    av = _val(a)
    out = av[index]
    tape = _active(a)
    if tape is None:
        return out

    def vjp(g, n):
        full = np.zeros_like(av)
        # accumulate so that repeated indices each contribute
        np.add.at(full, index, g)
        return (full,)

    return tape.record(out, (a,), vjp)


def concat(xs: Sequence, axis: int = -1):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _active(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g, n):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record(out, tuple(xs), vjp)


def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = av @ bv
    tape = _active(a, b)
    if tape is None:
        return out

    def vjp(g, n):
        ga = g @ np.swapaxes(bv, -1, -2) if n[0] else None
        gb = np.swapaxes(av, -1, -2) @ g if n[1] else None
        return ga, gb

    return tape.record(out, (a, b), vjp)


# ---------------------------------------------------------------- fused layers

def linear(x, W, b):
    """``x @ W + b``; ``W`` may carry a leading member axis ``(M, in, out)``."""
    xv, Wv, bv = _val(x), _val(W), _val(b)
    out = xv @ Wv
    out += bv
    tape = _active(x, W, b)
    if tape is None:
        return out

    def vjp(g, n):
        gx = g @ np.swapaxes(Wv, -1, -2) if n[0] else None
        gW = None
        if n[1]:
            if Wv.ndim == 2:
                gW = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gW = np.swapaxes(xv, -1, -2) @ g
        return gx, gW, g if n[2] else None

    return tape.record(out, (x, W, b), vjp)


def layernorm(x, gamma, beta, eps: float = 1e-8):
    """Per-row normalization over the last axis followed by scale and shift."""
    xv = _val(x)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = _val(gamma)
    out = xhat * gv + _val(beta)
    tape = _active(x, gamma, beta)
    if tape is None:
        return out

    def vjp(g, n):
        gx = None
        if n[0]:
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, g * xhat if n[1] else None, g if n[2] else None

    return tape.record(out, (x, gamma, beta), vjp)


def gaussian_nll(mean, logvar, target):
    """Mean over rows of the diagonal-Gaussian negative log-likelihood.

    Per row: ``0.5 * sum((target - mean)**2 * exp(-logvar) + logvar + log(2 pi))``.
    """
    mv, lv, tv = _val(mean), _val(logvar), _val(target)
    if not (mv.shape == lv.shape == tv.shape):
        raise DimensionError(f"shapes differ: {mv.shape}, {lv.shape}, {tv.shape}")
    rows = int(np.prod(mv.shape[:-1])) if mv.ndim > 1 else 1
    diff = tv - mv
    inv_var = np.exp(-lv)
    sq = diff * diff * inv_var
    out = np.asarray(0.5 * np.sum(sq + lv + LOG_2PI) / rows)
    tape = _active(mean, logvar, target)
    if tape is None:
        return out
    scale = 1.0 / rows

    def vjp(g, n):
        gm = -g * diff * inv_var * scale if (n[0] or n[2]) else None
        glv = g * 0.5 * (1.0 - sq) * scale if n[1] else None
        return gm, glv, (-gm if n[2] else None)

    return tape.record(out, (mean, logvar, target), vjp)


def squashed_gaussian_sample(mean, logstd, noise):
    """Reparameterized tanh-Gaussian sample and its log-density per row.

    ``noise`` holds standard-normal draws supplied by the caller.
    """
    nv = np.asarray(_val(noise))
    u = add(mean, mul(exp(logstd), nv))
    action = tanh(u)
    # keep samples strictly inside (-1, 1) even where tanh rounds to +-1
    av = _val(action)
    lim = 1.0 - np.finfo(av.dtype).epsneg
    np.clip(av, -lim, lim, out=av)
    # log(1 - tanh(u)^2), stable for large |u|
    correction = mul(sub(sub(LOG_2, u), softplus(mul(u, -2.0))), 2.0)
    per_dim = sub(sub(-0.5 * nv * nv - 0.5 * LOG_2PI, logstd), correction)
    return action, sum(per_dim, axis=-1)
