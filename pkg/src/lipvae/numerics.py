"""Small numerical substrate shared by the rest of the package.

Everything works in float64. Randomness goes through :class:`SeededRng`, a thin
wrapper around numpy's counter-based Philox generator whose substreams are
addressed by integer keys, so restarts and datapoints can draw independent
streams reproducibly regardless of evaluation order.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=DTYPE)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains non-finite values")
    return arr


def l2_norm(v) -> float:
    """Euclidean norm of a finite vector, safe against underflow and overflow."""
    arr = check_finite(as_vector(v), "l2_norm input")
    return math.hypot(*arr.tolist())


class SeededRng:
    """Reproducible random stream addressed by ``(seed, *path)``.

    Two instances built from the same seed and path yield bit-identical
    sequences. :meth:`spawn` derives an independent child stream keyed by
    extra integers; children do not consume state from the parent.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def spawn(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(keys))

    def normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size, dtype=DTYPE)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def get_state(self) -> dict:
        return {"seed": self.seed, "path": list(self.path),
                "bit_generator": self.generator.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(state["seed"], state["path"])
        rng.generator.bit_generator.state = state["bit_generator"]
        return rng

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path})"


def sample_std_gaussian(rng: SeededRng, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. standard normal values from ``rng``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return rng.normal(n)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``x`` may have any shape; the result has the same shape. A non-finite
    function value raises ``FloatingPointError`` naming the coordinate.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
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
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
