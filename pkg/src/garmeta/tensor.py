"""Dense float64 tensor ops and seeded randomness for the rest of the package.

Values are plain numpy arrays (row-major, float64). The functions here add
the contracts the package relies on: hard shape checks instead of silent
broadcasting, the zero-padded odd-kernel convolution used by both the
forward pass and the alignment kernels, and a reproducible Rng wrapper.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, KernelError, ProbabilityError, SamplingError

Array = np.ndarray


def as_tensor(values) -> Array:
    """Coerce nested lists/arrays to a float64 ndarray."""
    return np.asarray(values, dtype=np.float64)


def _check_same_shape(a: Array, b: Array, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Array, b: Array) -> Array:
    """Matrix product of a (n, d1) with b (d1, d2)."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return a @ b


def _check_kernel(kernel: Array) -> tuple[int, int]:
    if kernel.ndim != 2:
        raise KernelError(f"kernel must be 2-D, got shape {kernel.shape}")
    c1, c2 = kernel.shape
    if c1 % 2 == 0 or c2 % 2 == 0:
        raise KernelError(f"kernel height and width must be odd, got {kernel.shape}")
    return c1, c2


def _padded_windows(x: Array, c1: int, c2: int) -> Array:
    """Sliding (c1, c2) windows over the last two axes, zero-padded so the
    window count equals the input spatial size."""
    pad = [(0, 0)] * (x.ndim - 2) + [(c1 // 2, c1 // 2), (c2 // 2, c2 // 2)]
    xp = np.pad(x, pad)
    return sliding_window_view(xp, (c1, c2), axis=(x.ndim - 2, x.ndim - 1))


def conv2d(x: Array, kernel: Array) -> Array:
    """Zero-padded, stride-1 convolution of a single H x W image.

    out[i1, i2] = sum_j kernel[j1, j2] * x[i1 + j1 - c1//2, i2 + j2 - c2//2],
    with out-of-bounds reads yielding zero. Output shape equals x.shape.
    """
    if x.ndim != 2:
        raise DimensionError(f"conv2d expects a 2-D image, got shape {x.shape}")
    c1, c2 = _check_kernel(kernel)
    windows = _padded_windows(x, c1, c2)
    return np.einsum("hwij,ij->hw", windows, kernel)


def conv2d_batch(x: Array, kernel: Array) -> Array:
    """conv2d applied across a leading batch axis: (n, H, W) -> (n, H, W)."""
    if x.ndim != 3:
        raise DimensionError(f"conv2d_batch expects (n, H, W), got shape {x.shape}")
    c1, c2 = _check_kernel(kernel)
    windows = _padded_windows(x, c1, c2)
    return np.einsum("nhwij,ij->nhw", windows, kernel)


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def add(a: Array, b: Array) -> Array:
    _check_same_shape(a, b, "add")
    return a + b


def sub(a: Array, b: Array) -> Array:
    _check_same_shape(a, b, "sub")
    return a - b


def scale(a: Array, factor: float) -> Array:
    return a * float(factor)


def hadamard(a: Array, b: Array) -> Array:
    _check_same_shape(a, b, "hadamard")
    return a * b


def relu(a: Array) -> Array:
    return np.maximum(a, 0.0)


def exp(a: Array) -> Array:
    return np.exp(a)


def log(a: Array) -> Array:
    if np.any(a <= 0.0):
        raise ValueError("log requires strictly positive inputs")
    return np.log(a)


def total(a: Array) -> float:
    return float(np.sum(a))


def mean(a: Array) -> float:
    return float(np.mean(a))


def dot(a: Array, b: Array) -> float:
    """Dot product over flattened data."""
    _check_same_shape(a, b, "dot")
    return float(np.dot(a.ravel(), b.ravel()))


# spec-facing aliases; `total` avoids shadowing builtins inside this module
sum = total  # noqa: A001


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

class Rng:
    """Seeded random stream. Equal seeds give bit-identical call sequences.

    Single-owner by convention: never share one instance between concurrent
    samplers.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        if high <= low:
            raise SamplingError(f"empty integer range [{low}, {high})")
        return self._gen.integers(low, high, size=size)

    def categorical(self, p, size=None):
        """Index i with probability p[i]; vectorized when size is given."""
        p = np.asarray(p, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ProbabilityError(f"probability vector must be 1-D, got shape {p.shape}")
        if np.any(p < 0.0):
            raise ProbabilityError("probabilities must be non-negative")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise ProbabilityError(f"probabilities sum to {p.sum()!r}, not 1")
        cdf = np.cumsum(p)
        cdf[-1] = 1.0
        u = self._gen.random(size)
        idx = np.searchsorted(cdf, u, side="right")
        return np.minimum(idx, p.size - 1) if size is not None else int(min(idx, p.size - 1))

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices drawn uniformly from {0, ..., n-1}, in draw order."""
        if k > n:
            raise SamplingError(f"cannot draw {k} items from {n} without replacement")
        return self._gen.permutation(n)[:k]
