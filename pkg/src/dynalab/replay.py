"""Experience storage and mixed real/synthetic batch sampling."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .diffmath.serialize import load_arrays, save_arrays

ORIGINS = ("real", "synthetic")


class EmptyBufferError(RuntimeError):
    pass


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    terminated: bool = False
    truncated: bool = False
    origin: str = "real"


class RingBuffer:
    """Fixed-capacity FIFO store of transitions in contiguous arrays."""

    FIELDS = ("obs", "act", "rew", "next_obs", "terminated", "truncated")

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, origin: str = "real",
                 dtype=np.float64):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}")
        self.capacity = int(capacity)
        self.origin = origin
        self.obs = np.zeros((capacity, obs_dim), dtype=dtype)
        self.act = np.zeros((capacity, act_dim), dtype=dtype)
        self.rew = np.zeros(capacity, dtype=dtype)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=dtype)
        self.terminated = np.zeros(capacity, dtype=bool)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def push(self, t: Transition) -> None:
        if not (np.all(np.isfinite(t.s)) and np.all(np.isfinite(t.a)) and np.isfinite(t.r)
                and np.all(np.isfinite(t.s_next))):
            raise ValueError("transition has non-finite fields")
        i = self.cursor
        self.obs[i] = t.s
        self.act[i] = t.a
        self.rew[i] = t.r
        self.next_obs[i] = t.s_next
        self.terminated[i] = t.terminated
        self.truncated[i] = t.truncated
        self.cursor = (i + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def push_batch(self, obs, act, rew, next_obs, terminated, truncated=None) -> None:
        """Append rows in order, FIFO-overwriting as needed."""
        n = len(rew)
        if truncated is None:
            truncated = np.zeros(n, dtype=bool)
        start = self.cursor
        if n > self.capacity:
            sl = slice(n - self.capacity, n)
            obs, act, rew, next_obs = obs[sl], act[sl], rew[sl], next_obs[sl]
            terminated, truncated = terminated[sl], truncated[sl]
            start = (start + n - self.capacity) % self.capacity
        idx = (start + np.arange(len(rew))) % self.capacity
        self.obs[idx] = obs
        self.act[idx] = act
        self.rew[idx] = rew
        self.next_obs[idx] = next_obs
        self.terminated[idx] = terminated
        self.truncated[idx] = truncated
        self.cursor = int((self.cursor + n) % self.capacity)
        self.count = min(self.count + n, self.capacity)

    def ordered_indices(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        start = self.cursor if self.count == self.capacity else 0
        return (start + np.arange(self.count)) % self.capacity

    def transitions(self) -> List[Transition]:
        return [Transition(self.obs[i].copy(), self.act[i].copy(), float(self.rew[i]),
                           self.next_obs[i].copy(), bool(self.terminated[i]),
                           bool(self.truncated[i]), self.origin)
                for i in self.ordered_indices()]

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.count == 0:
            raise EmptyBufferError(f"cannot sample from empty {self.origin} buffer")
        return rng.integers(0, self.count, size=n)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.cursor},{self.count}".encode())
        for name in self.FIELDS:
            h.update(getattr(self, name)[: self.count].tobytes())
        return h.hexdigest()

    def dump(self, path: Union[str, Path]) -> None:
        arrays = {name: getattr(self, name)[: self.count].astype(float) for name in self.FIELDS}
        arrays["meta"] = np.array([self.capacity, self.cursor, self.count,
                                   ORIGINS.index(self.origin)], dtype=float)
        save_arrays(path, arrays)

    @classmethod
    def restore(cls, path: Union[str, Path]) -> "RingBuffer":
        a = load_arrays(path)
        capacity, cursor, count, origin = (int(v) for v in a["meta"])
        buf = cls(capacity, a["obs"].shape[1], a["act"].shape[1], ORIGINS[origin])
        for name in cls.FIELDS:
            dest = getattr(buf, name)
            dest[:count] = a[name].astype(dest.dtype)
        buf.cursor, buf.count = cursor, count
        return buf


@dataclass
class MixedBatch:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    n_real: int
    n_synthetic: int

    def __len__(self) -> int:
        return self.n_real + self.n_synthetic

    @property
    def origin(self) -> np.ndarray:
        return np.array(["real"] * self.n_real + ["synthetic"] * self.n_synthetic)


def synthetic_count(batch_size: int, ratio: float) -> int:
    """``round(ratio * batch_size)`` with ties to even."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"synthetic ratio must lie in [0, 1], got {ratio}")
    return int(round(ratio * batch_size))


def sample_mixed(real: RingBuffer, synthetic: Optional[RingBuffer], batch_size: int,
                 ratio: float, rng: np.random.Generator) -> MixedBatch:
    """Draw a batch holding exactly ``round(ratio * B)`` synthetic rows.

    Rows are sampled uniformly with replacement from each buffer; real rows
    come first. A buffer whose share is zero is not touched, so the random
    stream is identical to pure real sampling when ``ratio == 0``.
    """
    n_syn = synthetic_count(batch_size, ratio)
    n_real = batch_size - n_syn
    parts = []
    if n_real:
        parts.append((real, real.sample_indices(n_real, rng)))
    if n_syn:
        if synthetic is None:
            raise EmptyBufferError("cannot sample from empty synthetic buffer")
        parts.append((synthetic, synthetic.sample_indices(n_syn, rng)))

    def gather(name):
        return np.concatenate([getattr(buf, name)[idx] for buf, idx in parts])

    return MixedBatch(gather("obs"), gather("act"), gather("rew"), gather("next_obs"),
                      gather("terminated"), gather("truncated"), n_real, n_syn)
