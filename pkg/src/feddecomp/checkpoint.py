"""FDCP parameter files.

Layout, all integers little-endian uint32, all values little-endian float64::

    b"FDCP"  version  count
    count x (ndim, dim_0 .. dim_{ndim-1})     # layer table
    row-major doubles of every tensor, in table order

A ModelParams is stored as its tensors in canonical order
(sigma, B, A per layer, then biases).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .errors import FormatError
from .models import DecomposedParam, ModelParams
from .tensor import Tensor

MAGIC = b"FDCP"
VERSION = 1


def dumps_arrays(arrays: Sequence[np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for a in arrays:
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_arrays(blob: bytes) -> List[np.ndarray]:
    if blob[:4] != MAGIC:
        raise FormatError("bad FDCP magic at offset 0")
    if len(blob) < 12:
        raise FormatError("truncated FDCP header at offset 4")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported FDCP version {version} at offset 4")
    pos = 12
    shapes = []
    for _ in range(count):
        if pos + 4 > len(blob):
            raise FormatError(f"truncated layer table at offset {pos}")
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + 4 * ndim > len(blob):
            raise FormatError(f"truncated layer table at offset {pos}")
        shapes.append(struct.unpack_from(f"<{ndim}I", blob, pos))
        pos += 4 * ndim
    out = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(blob):
            raise FormatError(f"truncated tensor data at offset {pos}")
        out.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape))
        pos += 8 * n
    if pos != len(blob):
        raise FormatError(f"trailing bytes at offset {pos}")
    return out


def save_params(params: ModelParams, path) -> None:
    Path(path).write_bytes(dumps_arrays([t.data for t in params.tensors()]))


def load_params(path, like: ModelParams) -> ModelParams:
    """Read a checkpoint whose layer table must match ``like``'s shapes."""
    arrays = loads_arrays(Path(path).read_bytes())
    expected = [t.shape for t in like.tensors()]
    if [a.shape for a in arrays] != expected:
        raise FormatError(f"{path}: layer table does not match the model")
    it = iter(arrays)
    weights = []
    for w in like.weights:
        weights.append(DecomposedParam(Tensor(next(it)), Tensor(next(it)), Tensor(next(it)),
                                       w.inner_rank, w.kind))
    biases = [Tensor(next(it)) for _ in like.biases]
    return ModelParams(weights, biases)
