"""Dense float64 arithmetic, a portable PRNG and finite-difference oracles.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The oracles in
this module (central differences, a hand-rolled LU determinant) are kept
independent of the analytic code paths they are used to check.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from crow.errors import EmptyTensorError, EvaluationError, ShapeError

__all__ = [
    "Rng",
    "as_tensor",
    "mat_vec",
    "sample_standard_normal",
    "finite_difference_jacobian",
    "finite_difference_gradient",
    "lu_log_abs_det",
    "cofactor_det",
]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix64(states: np.ndarray) -> np.ndarray:
    z = states.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


class Rng:
    """Counter-based SplitMix64 generator.

    Word ``i`` of the stream is ``mix(seed + (i + 1) * 0x9E3779B97F4A7C15)``
    with the standard SplitMix64 finalizer, so any slice of the stream can be
    produced without touching the ones before it and results do not depend on
    platform or numpy version. Uniforms use the top 53 bits offset by half an
    ulp (never exactly 0 or 1); normals use the Box-Muller transform on
    consecutive uniform pairs.
    """

    def __init__(self, seed: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def copy(self) -> "Rng":
        return Rng(self.seed, self.counter)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from (seed, key); does not advance self."""
        base = np.array([(self.seed ^ ((int(key) * 0xD1B54A32D192ED03) & _MASK64))], dtype=np.uint64)
        return Rng(int(_splitmix64(base)[0]))

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed) + idx * _GAMMA
        self.counter += n
        return _splitmix64(states)

    def uniform(self, size=None) -> np.ndarray:
        shape = _shape(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = ((self.bits(n) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return u.reshape(shape)

    def normal(self, size=None) -> np.ndarray:
        shape = _shape(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        radius = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        return out[:n].reshape(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in [low, high)."""
        u = self.uniform(size)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def _shape(size) -> tuple:
    if size is None:
        return ()
    if isinstance(size, (int, np.integer)):
        return (int(size),)
    return tuple(int(s) for s in size)


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def mat_vec(m, v) -> np.ndarray:
    m, v = as_tensor(m), as_tensor(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"mat_vec: cannot multiply matrix {m.shape} by vector {v.shape}")
    return m @ v


def sample_standard_normal(rng: Rng, n: int) -> np.ndarray:
    if n < 1:
        raise EmptyTensorError("sample_standard_normal needs n >= 1")
    return rng.normal(n)


def finite_difference_jacobian(
    f: Callable[[np.ndarray], np.ndarray], x0, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference Jacobian, ``J[i, j] ~ d f_i / d x_j``."""
    x0 = as_tensor(x0).ravel()
    cols = []
    for j in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += eps
        xm[j] -= eps
        fp = _probe(f, xp)
        fm = _probe(f, xm)
        cols.append((fp - fm) / (2.0 * eps))
    return np.stack(cols, axis=1)


def finite_difference_gradient(
    loss: Callable[[np.ndarray], float], p0, eps: float = 1e-5
) -> np.ndarray:
    p0 = as_tensor(p0)
    flat = p0.ravel()
    grad = np.empty_like(flat)
    for j in range(flat.size):
        pp = flat.copy()
        pm = flat.copy()
        pp[j] += eps
        pm[j] -= eps
        lp = float(_probe(loss, pp.reshape(p0.shape)))
        lm = float(_probe(loss, pm.reshape(p0.shape)))
        grad[j] = (lp - lm) / (2.0 * eps)
    return grad.reshape(p0.shape)


def _probe(f, x):
    out = np.asarray(f(x), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise EvaluationError(f"non-finite function value at probe point {x.tolist()}")
    return out.ravel() if out.ndim else out


def lu_log_abs_det(m) -> tuple[int, float]:
    """Sign and log|det| by Doolittle LU with partial pivoting.

    A singular matrix returns ``(0, -inf)``.
    """
    a = as_tensor(m).copy()
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"lu_log_abs_det: matrix must be square, got {a.shape}")
    n = a.shape[0]
    sign = 1
    logabs = 0.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        pivot = a[p, k]
        if pivot == 0.0:
            return 0, -math.inf
        if p != k:
            a[[k, p]] = a[[p, k]]
            sign = -sign
        if pivot < 0:
            sign = -sign
        logabs += math.log(abs(pivot))
        a[k + 1:, k] /= pivot
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    return sign, logabs


def cofactor_det(m) -> float:
    """Laplace expansion along the first row; exponential cost, small d only."""
    a = as_tensor(m)
    n = a.shape[0]
    if n == 1:
        return float(a[0, 0])
    total = 0.0
    for j in range(n):
        minor = np.delete(a[1:], j, axis=1)
        total += (-1) ** j * a[0, j] * cofactor_det(minor)
    return total
