"""Dense-tensor core: construction helpers, elementwise nonlinearities, and
the central-difference gradient oracle that backstops every differentiable
operation in this package.

Tensors are plain numpy arrays in C (row-major) order, float32 ("single",
the default working precision) or float64 ("double", mandatory inside
gradient checks). Construction goes through :func:`tensor` /
:func:`check_finite` so the no-NaN/no-Inf invariant holds at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf

__all__ = [
    "NumericalError",
    "PRECISION_DTYPES",
    "Dual",
    "tensor",
    "check_finite",
    "matmul",
    "gelu",
    "gelu_grad",
    "l2_normalize",
    "softmax",
    "softmax_vjp",
    "sigmoid",
    "sigmoid_grad",
    "tanh",
    "finite_diff_grad",
]

# l2_normalize maps zero-norm slices to zero vectors via this denominator shift.
EPS_NORM = 1e-12

PRECISION_DTYPES = {"single": np.float32, "double": np.float64}


class NumericalError(Exception):
    """Raised when a non-finite value appears where the contract forbids it."""


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{name} contains non-finite values")
    return x


def tensor(data, precision: str = "single") -> np.ndarray:
    """Build a validated array: C-order, requested precision, all finite."""
    if precision not in PRECISION_DTYPES:
        raise ValueError(f"unknown precision {precision!r}; expected 'single' or 'double'")
    arr = np.ascontiguousarray(data, dtype=PRECISION_DTYPES[precision])
    return check_finite(arr, "tensor data")


@dataclass
class Dual:
    """A value paired with its cotangent accumulator (same shape)."""

    value: np.ndarray
    cotangent: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.value)
        c = np.asarray(self.cotangent)
        if v.shape != c.shape:
            raise ValueError(
                f"cotangent shape {c.shape} does not match value shape {v.shape}"
            )


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product for [..., m, k] x [..., k, n].

    Leading batch extents must be equal or broadcastable from 1. Raises a
    shape-mismatch error naming both operand shapes.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    for da, db in zip(a.shape[-3::-1], b.shape[-3::-1]):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU x * Phi(x) using the Gaussian CDF (not the tanh approximation)."""
    x = np.asarray(x)
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of exact GELU: Phi(x) + x * pdf(x)."""
    x = np.asarray(x)
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale each slice along ``axis`` to unit Euclidean norm.

    Zero-norm slices come back as zero vectors (the denominator carries a
    1e-12 shift), so cosine similarity against an empty feature patch is 0
    rather than NaN.
    """
    x = np.asarray(x)
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    return x / (norm + EPS_NORM)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; outputs positive and sum to 1 along ``axis``."""
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_vjp(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    """Cotangent through softmax given its output ``y``: y * (dy - <dy, y>)."""
    inner = np.sum(dy * y, axis=axis, keepdims=True)
    return y * (dy - inner)


def sigmoid(x):
    """Numerically stable logistic function; output in (0, 1)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid_grad(x) -> float:
    s = sigmoid(np.asarray(x, dtype=float))
    return s * (1.0 - s)


def tanh(x: np.ndarray) -> np.ndarray:
    """Elementwise tanh; output in (-1, 1)."""
    return np.tanh(np.asarray(x))


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar-valued ``f`` at ``x``.

    h = 1e-5 balances truncation against rounding for unit-scale double
    inputs; ``x`` is promoted to float64. A non-finite evaluation of ``f``
    aborts with the offending coordinate index.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(
                f"finite_diff_grad: non-finite evaluation at coordinate {i}"
            )
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
