"""Deterministic float32 kernels, seeded randomness and the SCTD tensor dump format.

Every matmul in the package goes through :func:`matmul`, which accumulates in a
fixed index order and reports its multiply-accumulate count to any active
:class:`MacCounter`.  The resulting bitwise reproducibility is what lets the
cache tests compare cached and uncached runs with ``==`` instead of a tolerance.
"""

from __future__ import annotations

import contextlib
import contextvars
import io
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .errors import DegenerateReferenceError, FormatError, NonFiniteError, ShapeError, VersionError

DTYPE = np.float32
LAYER_NORM_EPS = 1e-5

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def as_tensor(x, *, name: str = "tensor") -> np.ndarray:
    """Return `x` as a C-contiguous float32 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim == 0 or 0 in arr.shape:
        raise ShapeError(f"{name}: shape {arr.shape} must have positive dimensions")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name}: contains non-finite values")
    return arr


# --------------------------------------------------------------------------
# MAC accounting

_active_counters: contextvars.ContextVar[tuple["MacCounter", ...]] = contextvars.ContextVar(
    "smoothcache_mac_counters", default=()
)
_mac_label: contextvars.ContextVar[str] = contextvars.ContextVar("smoothcache_mac_label", default="other")


@dataclass
class MacCounter:
    """Tally of MACs reported by :func:`matmul`, optionally split by label."""

    total: int = 0
    by_label: dict[str, int] = field(default_factory=dict)

    def add(self, macs: int, label: str) -> None:
        self.total += macs
        self.by_label[label] = self.by_label.get(label, 0) + macs


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count every matmul executed inside the block.  Counters nest."""
    counter = MacCounter()
    token = _active_counters.set(_active_counters.get() + (counter,))
    try:
        yield counter
    finally:
        _active_counters.reset(token)


@contextlib.contextmanager
def mac_label(label: str) -> Iterator[None]:
    token = _mac_label.set(label)
    try:
        yield
    finally:
        _mac_label.reset(token)


# --------------------------------------------------------------------------
# Threading

_num_threads = 1


def set_num_threads(n: int) -> None:
    """Split matmul output rows over `n` threads.

    Each output element is still reduced by a single thread in index order, so
    results stay bitwise identical to the single-threaded kernel.
    """
    global _num_threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = int(n)


def get_num_threads() -> int:
    return _num_threads


# --------------------------------------------------------------------------
# Kernels


def _accumulate_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # c = sum_p a[..., :, p] (outer) b[..., p, :], summed for p = 0..k-1 in order
    out_shape = a.shape[:-1] + (b.shape[-1],)
    c = np.zeros(out_shape, dtype=DTYPE)
    for p in range(a.shape[-1]):
        c += a[..., :, p, None] * b[..., p, None, :]
    return c


try:
    import numba
except ImportError:  # pragma: no cover - numba ships with the supported environment
    numba = None

if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def _mm_shared(a, b):
        m, k = a.shape
        n = b.shape[1]
        c = np.zeros((m, n), dtype=np.float32)
        for i in range(m):
            for p in range(k):
                aip = a[i, p]
                for j in range(n):
                    c[i, j] += aip * b[p, j]
        return c

    @numba.njit(cache=True, nogil=True)
    def _mm_batched(a, b):
        nb, m, k = a.shape
        n = b.shape[2]
        c = np.zeros((nb, m, n), dtype=np.float32)
        for q in range(nb):
            for i in range(m):
                for p in range(k):
                    aip = a[q, i, p]
                    for j in range(n):
                        c[q, i, j] += aip * b[q, p, j]
        return c

    def _accumulate(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        # Same per-element order as _accumulate_numpy; compiled without fastmath.
        out_shape = a.shape[:-1] + (b.shape[-1],)
        if b.ndim == 2:
            flat = np.ascontiguousarray(a.reshape(-1, a.shape[-1]))
            return _mm_shared(flat, np.ascontiguousarray(b)).reshape(out_shape)
        fa = np.ascontiguousarray(a.reshape((-1,) + a.shape[-2:]))
        fb = np.ascontiguousarray(b.reshape((-1,) + b.shape[-2:]))
        return _mm_batched(fa, fb).reshape(out_shape)

else:  # pragma: no cover
    _accumulate = _accumulate_numpy


def matmul_reference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pure-numpy twin of :func:`matmul` (same accumulation order, no MAC reporting)."""
    return _accumulate_numpy(np.asarray(a, DTYPE), np.asarray(b, DTYPE))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with fixed-order float32 accumulation.

    `a` is ``(..., m, k)``; `b` is either a single ``(k, n)`` matrix shared by
    every leading index of `a`, or ``(..., k, n)`` with the same leading shape.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise NonFiniteError("matmul operands must be finite")

    counters = _active_counters.get()
    if counters:
        macs = math.prod(a.shape[:-1]) * a.shape[-1] * b.shape[-1]
        label = _mac_label.get()
        for counter in counters:
            counter.add(macs, label)

    if _num_threads == 1:
        return _accumulate(a, b)
    if b.ndim == 2:
        flat = a.reshape(-1, a.shape[-1])
        chunks = np.array_split(np.arange(flat.shape[0]), _num_threads)
        out = np.empty((flat.shape[0], b.shape[-1]), dtype=DTYPE)
        with ThreadPoolExecutor(_num_threads) as pool:
            for idx, res in zip(chunks, pool.map(lambda i: _accumulate(flat[i], b), chunks)):
                out[idx] = res
        return out.reshape(a.shape[:-1] + (b.shape[-1],))
    lead = a.shape[:-2]
    fa = a.reshape((-1,) + a.shape[-2:])
    fb = b.reshape((-1,) + b.shape[-2:])
    chunks = np.array_split(np.arange(fa.shape[0]), _num_threads)
    out = np.empty((fa.shape[0], a.shape[-2], b.shape[-1]), dtype=DTYPE)
    with ThreadPoolExecutor(_num_threads) as pool:
        for idx, res in zip(chunks, pool.map(lambda i: _accumulate(fa[i], fb[i]), chunks)):
            out[idx] = res
    return out.reshape(lead + out.shape[-2:])


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: np.ndarray, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Affine-free layer norm over the last axis (population variance)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs a last dimension of at least 2")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + DTYPE(eps))


def gelu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    inner = DTYPE(_SQRT_2_OVER_PI) * (x + DTYPE(0.044715) * x * x * x)
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(inner))


def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return x / (DTYPE(1.0) + np.exp(-x))


def rel_l1_error(current: np.ndarray, stale: np.ndarray) -> float:
    """``sum|current - stale| / sum|current|``, accumulated in float64.

    Raises DegenerateReferenceError when `current` is identically zero.
    """
    current = np.asarray(current)
    stale = np.asarray(stale)
    if current.shape != stale.shape:
        raise ShapeError(f"rel_l1_error shapes differ: {current.shape} vs {stale.shape}")
    c = current.astype(np.float64)
    denom = np.abs(c).sum()
    if denom == 0.0:
        raise DegenerateReferenceError("reference tensor has zero L1 norm")
    return float(np.abs(c - stale.astype(np.float64)).sum() / denom)


def sinusoidal_embedding(values, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """``[cos(v*f_i), sin(v*f_i)]`` features with geometric frequencies, shape ``(len(values), dim)``."""
    if dim < 2 or dim % 2:
        raise ShapeError("sinusoidal embedding dimension must be even and >= 2")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(values, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(DTYPE)


# --------------------------------------------------------------------------
# Randomness


class SeededRng:
    """SplitMix64 stream with Box-Muller normals.

    Uniforms are the top 53 bits of each 64-bit output scaled into [0, 1).
    Normals consume uniforms in pairs (u1, u2) and emit
    ``r*cos(2*pi*u2), r*sin(2*pi*u2)`` with ``r = sqrt(-2 ln(1 - u1))``,
    interleaved in that order; an odd trailing draw discards the sine half.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(_GOLDEN_GAMMA)
        self.state = (self.state + n * _GOLDEN_GAMMA) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        theta = 2.0 * math.pi * u[1::2]
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].astype(DTYPE).reshape(shape)


# --------------------------------------------------------------------------
# SCTD dump format: b"SCTD", u32 version, u32 ndim, ndim x u64 dims, f32 LE payload

SCTD_MAGIC = b"SCTD"
SCTD_VERSION = 1


def _write_one(fh: BinaryIO, tensor: np.ndarray) -> None:
    arr = as_tensor(tensor)
    fh.write(SCTD_MAGIC)
    fh.write(struct.pack("<II", SCTD_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype("<f4").tobytes())


def _read_one(fh: BinaryIO) -> np.ndarray | None:
    magic = fh.read(4)
    if not magic:
        return None
    if magic != SCTD_MAGIC:
        raise FormatError(f"bad SCTD magic {magic!r}")
    header = fh.read(8)
    if len(header) != 8:
        raise FormatError("truncated SCTD header")
    version, ndim = struct.unpack("<II", header)
    if version != SCTD_VERSION:
        raise VersionError(f"unsupported SCTD version {version}")
    raw_dims = fh.read(8 * ndim)
    if len(raw_dims) != 8 * ndim:
        raise FormatError("truncated SCTD dimensions")
    dims = struct.unpack(f"<{ndim}Q", raw_dims)
    count = math.prod(dims)
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError(f"truncated SCTD payload: expected {count} floats")
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(dims)


def write_sctd(path: str | Path, tensor: np.ndarray) -> None:
    with open(path, "wb") as fh:
        _write_one(fh, tensor)


def read_sctd(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = _read_one(fh)
        if arr is None:
            raise FormatError(f"{path}: empty SCTD file")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after SCTD record")
    return arr


def write_sctd_sequence(path: str | Path, tensors) -> None:
    with open(path, "wb") as fh:
        for t in tensors:
            _write_one(fh, t)


def read_sctd_sequence(path: str | Path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while (arr := _read_one(fh)) is not None:
            out.append(arr)
    return out


def sctd_bytes(tensor: np.ndarray) -> bytes:
    buf = io.BytesIO()
    _write_one(buf, tensor)
    return buf.getvalue()
