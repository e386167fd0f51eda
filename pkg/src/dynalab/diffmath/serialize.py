"""Flat binary container for named float arrays.

Layout (all integers little-endian)::

    b"DYNL"  u32 version
    repeated until EOF:
        u32 name_len, name (utf-8), u32 rank, rank x u64 dims,
        prod(dims) x f64 elements
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .params import ParamSet

MAGIC = b"DYNL"
VERSION = 1

PathLike = Union[str, Path]


class FormatError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> Dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise FormatError("bad magic bytes")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    pos = 8
    out: Dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims))
            if pos + 8 * count > len(data):
                raise FormatError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except struct.error as exc:
        raise FormatError(f"truncated header at byte {pos}") from exc
    return out


def save_arrays(path: PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load_arrays(path: PathLike) -> Dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def save_params(path: PathLike, params: ParamSet) -> None:
    save_arrays(path, params)


def load_params(path: PathLike, dtype=np.float64) -> ParamSet:
    arrays = load_arrays(path)
    return ParamSet.from_arrays({k: v.astype(dtype) for k, v in arrays.items()}, dtype=dtype)
