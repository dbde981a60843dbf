"""Float64 tensors and seeded randomness.

Everything in this package runs on plain numpy arrays with dtype float64
in C (row-major) memory order: the flat index of element (i, j, k) in a
tensor of shape (A, B, C) is ``i*B*C + j*C + k``. This module pins those
conventions, provides shape-checked arithmetic helpers, and wraps the
single random generator that all stochastic steps draw from.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float64


def _checked_shape(shape) -> tuple[int, ...]:
    try:
        dims = tuple(int(d) for d in shape)
    except TypeError as exc:
        raise ShapeError(f"shape must be a sequence of extents, got {shape!r}") from exc
    if not dims:
        raise ShapeError("shape must have at least one extent")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got {dims}")
    return dims


def zeros(shape: Sequence[int]) -> np.ndarray:
    """All-zero tensor of the given shape; every extent must be >= 1."""
    return np.zeros(_checked_shape(shape), dtype=DTYPE)


def _binary(op, a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    if np.isscalar(b) or getattr(b, "ndim", None) == 0:
        out = op(a, DTYPE(b))
    else:
        b = np.asarray(b, dtype=DTYPE)
        if a.shape != b.shape:
            raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")
        out = op(a, b)
    if not np.isfinite(out).all():
        raise ValueError("non-finite result in elementwise operation")
    return out


def add(a, b) -> np.ndarray:
    """Elementwise a + b; b may be a scalar."""
    return _binary(np.add, a, b)


def sub(a, b) -> np.ndarray:
    """Elementwise a - b; b may be a scalar."""
    return _binary(np.subtract, a, b)


def mul(a, b) -> np.ndarray:
    """Elementwise a * b; b may be a scalar."""
    return _binary(np.multiply, a, b)


def sum(a) -> float:  # noqa: A001 - intentional, used as tensor.sum(x)
    return float(np.sum(np.asarray(a, dtype=DTYPE)))


def mean(a) -> float:
    return float(np.mean(np.asarray(a, dtype=DTYPE)))


def std(a) -> float:
    """Population standard deviation (ddof=0)."""
    return float(np.std(np.asarray(a, dtype=DTYPE)))


class Rng:
    """Seeded deterministic random stream.

    Backed by numpy's PCG64 bit generator (permuted congruential
    generator, 128-bit state / 64-bit output), so the same seed yields
    the same draw sequence on every run and platform for a given numpy
    version. ``derive`` builds an independent child stream by hashing the
    parent seed together with the given keys (SHA-256, first 8 bytes,
    little-endian); derived streams therefore do not depend on how much
    the parent has already been consumed.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & (2**64 - 1)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *keys: int | str) -> "Rng":
        material = repr((self.seed, *keys)).encode("utf-8")
        child = int.from_bytes(hashlib.sha256(material).digest()[:8], "little")
        return Rng(child)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int) -> int:
        """One draw from [low, high)."""
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
