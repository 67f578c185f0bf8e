"""Float64 vector primitives, stable softmax, seeded RNG and a
finite-difference gradient oracle.

Random numbers come from numpy's PCG64 bit generator (``np.random.Generator``).
Streams are keyed by ``(seed, purpose)`` through ``SeedSequence`` so independent
consumers of one experiment seed never share draws.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericError, ParameterError

RNG_ALGORITHM = "numpy.PCG64/SeedSequence"


def as_vec(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def dot(a, b) -> float:
    a, b = as_vec(a), as_vec(b)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


def l2_normalize(a, axis=-1) -> np.ndarray:
    """Scale ``a`` to unit Euclidean norm along ``axis``.

    Accepts a single vector or a stack of row vectors.
    """
    a = as_vec(a)
    norm = np.linalg.norm(a, axis=axis, keepdims=True)
    if np.any(norm == 0.0):
        raise DegenerateInputError("cannot normalize a zero vector")
    return a / norm


def softmax(z, tau: float = 1.0, axis=-1) -> np.ndarray:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = as_vec(z) / tau
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z, tau: float = 1.0, axis=-1) -> np.ndarray:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = as_vec(z) / tau
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def make_rng(seed: int, purpose: str = "") -> np.random.Generator:
    """Seeded generator; ``purpose`` selects an independent sub-stream."""
    if seed < 0 or seed >= 2**64:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    key = [int(seed)]
    if purpose:
        key.append(zlib.crc32(purpose.encode()))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def finite_diff_grad(f, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any array shape)."""
    if not eps > 0:
        raise ParameterError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def zero_pad(v, dim: int) -> np.ndarray:
    """Append zeros along the last axis up to ``dim`` entries."""
    v = as_vec(v)
    d = v.shape[-1]
    if dim < d:
        raise DimensionError(f"cannot pad {d}-dim vectors down to {dim}")
    if dim == d:
        return v
    pad = [(0, 0)] * (v.ndim - 1) + [(0, dim - d)]
    return np.pad(v, pad)
