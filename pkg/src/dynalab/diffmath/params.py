"""Named parameter collections backed by one contiguous buffer.

Every array in a :class:`ParamSet` is a view into a single flat vector, so
optimizer and Polyak updates run as a handful of vectorized operations
regardless of how many layers a network has.
"""
from __future__ import annotations

import hashlib
from typing import Dict, Iterator, Mapping, Sequence, Tuple

import numpy as np

Layout = Tuple[Tuple[str, Tuple[int, ...]], ...]


class ParamSet(Mapping):
    """Mapping ``name -> ndarray`` whose values share one flat buffer."""

    def __init__(self, layout: Sequence[Tuple[str, Sequence[int]]], flat=None,
                 dtype=np.float64, seed=None):
        layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in layout)
        names = [n for n, _ in layout]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")
        size = sum(int(np.prod(s)) for _, s in layout)
        if flat is None:
            flat = np.zeros(size, dtype=dtype)
        else:
            flat = np.asarray(flat)
            if flat.ndim != 1 or flat.size != size:
                raise ValueError(f"flat buffer has {flat.size} elements, layout needs {size}")
        self.layout: Layout = layout
        self.flat = flat
        self.seed = seed
        self._views: Dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in layout:
            n = int(np.prod(shape))
            self._views[name] = flat[offset:offset + n].reshape(shape)
            offset += n

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype=None, seed=None) -> "ParamSet":
        items = [(k, np.asarray(v)) for k, v in arrays.items()]
        if dtype is None:
            dtype = np.result_type(*[v.dtype for _, v in items]) if items else np.float64
        ps = cls([(k, v.shape) for k, v in items], dtype=dtype, seed=seed)
        for k, v in items:
            ps._views[k][...] = v
        return ps

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        self._views[name][...] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self._views)

    def __len__(self) -> int:
        return len(self._views)

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}{list(s)}" for n, s in self.layout)
        return f"ParamSet({inner}, dtype={self.flat.dtype})"

    @property
    def dtype(self):
        return self.flat.dtype

    def zeros_like(self) -> "ParamSet":
        return ParamSet(self.layout, dtype=self.flat.dtype)

    def copy(self) -> "ParamSet":
        return ParamSet(self.layout, self.flat.copy(), seed=self.seed)

    def assign(self, other: "ParamSet") -> None:
        self._check_layout(other)
        self.flat[...] = other.flat

    def _check_layout(self, other: "ParamSet") -> None:
        if other.layout != self.layout:
            raise ValueError("parameter layouts differ")

    def allfinite(self) -> bool:
        return bool(np.isfinite(self.flat).all())

    def digest(self) -> str:
        """SHA-256 over layout and raw bytes; equal digests mean bit-equal sets."""
        h = hashlib.sha256()
        h.update(repr(self.layout).encode())
        h.update(np.ascontiguousarray(self.flat, dtype="<f8").tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamSet") -> bool:
        return self.layout == other.layout and np.array_equal(self.flat, other.flat)

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self._views.items() if k.startswith(prefix)}


def polyak_update(target: ParamSet, online: ParamSet, retain: float) -> None:
    """In place ``target <- retain * target + (1 - retain) * online``."""
    target._check_layout(online)
    target.flat *= retain
    target.flat += (1.0 - retain) * online.flat
