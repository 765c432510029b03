"""Deterministic numeric kernel.

Vectors and matrices are plain float64 numpy arrays. The helpers here validate
shapes and finiteness and fix the accumulation order where the result is
compared bitwise across runs.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, UsageError

FLOAT = np.float64


def as_vector(a, name="vector") -> np.ndarray:
    """Coerce ``a`` to a finite, non-empty 1-D float64 array."""
    arr = np.asarray(a, dtype=FLOAT)
    if arr.ndim != 1 or arr.size == 0:
        raise UsageError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise UsageError(f"{name} has non-finite entries")
    return arr


def as_matrix(a, name="matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=FLOAT)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise UsageError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise UsageError(f"{name} has non-finite entries")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator backed by the counter-based Philox bit generator."""
    if seed < 0 or seed >= 2**64:
        raise UsageError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn_seeds(seed: int, n: int) -> list[int]:
    """Derive ``n`` independent child seeds from ``seed`` (for parallel workers)."""
    ss = np.random.SeedSequence(int(seed))
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(n)]


def dot(a, b) -> float:
    """Sum of products accumulated strictly left to right."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise UsageError(f"dimension mismatch: {a.size} vs {b.size}")
    total = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        total += x * y
    return total


def norm(a) -> float:
    a = as_vector(a)
    return math.sqrt(dot(a, a))


def l2_normalize(a) -> np.ndarray:
    a = as_vector(a)
    n = norm(a)
    if n == 0.0:
        raise DegenerateInputError("cannot normalize the zero vector")
    return a / n


def normalize_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise l2 normalization of a stack of vectors (last axis)."""
    n = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    if np.any(n == 0.0):
        raise DegenerateInputError("cannot normalize a zero row")
    return a / n


def log_sum_exp(xs: Sequence[float]) -> float:
    """``log(sum(exp(xs)))`` via the max-shift identity."""
    xs = [float(x) for x in xs]
    if not xs:
        raise UsageError("log_sum_exp of an empty sequence")
    m = max(xs)
    if math.isinf(m):
        return m
    acc = 0.0
    for x in xs:
        acc += math.exp(x - m)
    return m + math.log(acc)


def log_sum_exp_rows(x: np.ndarray, axis=-1) -> np.ndarray:
    """Vectorized max-shift log-sum-exp along ``axis``."""
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax_rows(x: np.ndarray, axis=-1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(xs, dtype=FLOAT)
    y = np.asarray(ys, dtype=FLOAT)
    if x.ndim != 1 or x.shape != y.shape:
        raise UsageError("pearson needs two 1-D series of equal length")
    if x.size < 2:
        raise UsageError("pearson needs at least two points")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise DegenerateInputError("pearson is undefined for a constant series")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))
