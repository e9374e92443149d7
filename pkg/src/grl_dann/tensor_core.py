"""Dense tensor helpers, seeded randomness, RDT serialization and the
finite-difference gradient oracle.

Tensors are plain ``numpy.ndarray`` objects (C-contiguous, row-major).
Training runs in float32; gradient checks run the same code in float64.

Randomness comes from numpy's ``PCG64`` bit generator: a 128-bit LCG
``state = state * 0x2360ed051fc65da44385df649fccf645 + inc (mod 2**128)``
whose output is the XSL-RR permutation of the state (xor of the high and
low 64-bit halves, rotated right by the top 6 bits). Seeding goes through
``SeedSequence`` so a given integer seed yields the same stream on every
platform and numpy release that keeps the PCG64 stream stable.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import OracleError, ShapeError

Tensor = np.ndarray
Rng = np.random.Generator

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64

RDT_MAGIC = b"RDT1"


def make_rng(seed: int) -> Rng:
    return np.random.Generator(np.random.PCG64(seed))


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: every dimension must be >= 1")
    return shape


def tensor_new(shape: Sequence[int], fill: float = 0.0, dtype=TRAIN_DTYPE) -> Tensor:
    return np.full(_check_shape(shape), fill, dtype=dtype)


def he_init(shape: Sequence[int], fan_in: int, rng: Rng, dtype=TRAIN_DTYPE) -> Tensor:
    """I.i.d. N(0, 2/fan_in) draws, sampled in float64 then cast."""
    shape = _check_shape(shape)
    if fan_in < 1:
        raise ShapeError(f"fan_in must be >= 1, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def ravel_index(index: Sequence[int], shape: Sequence[int]) -> int:
    offset = 0
    for i, d in zip(index, shape):
        if not 0 <= i < d:
            raise ShapeError(f"index {tuple(index)} out of bounds for {tuple(shape)}")
        offset = offset * d + i
    return offset


def unravel_offset(offset: int, shape: Sequence[int]) -> tuple[int, ...]:
    out = []
    for d in reversed(shape):
        offset, r = divmod(offset, d)
        out.append(r)
    if offset:
        raise ShapeError("offset out of bounds")
    return tuple(reversed(out))


def finite_diff_grad(
    f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5
) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, in float64.

    ``f`` receives a float64 copy of ``x`` with one coordinate perturbed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=CHECK_DTYPE)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: Tensor, b: Tensor) -> float:
    """max |a-b| / max(|a|, |b|, 1e-8) over coordinates."""
    a = np.asarray(a, dtype=CHECK_DTYPE)
    b = np.asarray(b, dtype=CHECK_DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# --- RDT binary tensor files -------------------------------------------------
# "RDT1" | u32 rank | rank x u32 dims | prod(dims) x f32, all little-endian.


def write_rdt(fh: BinaryIO, t: Tensor) -> None:
    t = np.asarray(t)
    fh.write(RDT_MAGIC)
    fh.write(struct.pack("<I", t.ndim))
    fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
    fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_rdt(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != RDT_MAGIC:
        raise ShapeError(f"bad RDT magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(fh, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ShapeError(f"truncated RDT record: wanted {n} bytes, got {len(buf)}")
    return buf


def save_rdt(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        write_rdt(fh, t)


def load_rdt(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_rdt(fh)
