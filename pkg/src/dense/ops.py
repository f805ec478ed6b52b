"""Dense matrix operations shared by the kernels, the MoE layer and the oracles.

Matrices are plain 2-D numpy arrays of float64 in row-major order. `matmul`
reduces every output element over the inner index in ascending order, so the
result is bitwise identical to a naive triple loop that starts each sum at 0.0,
no matter how the output is split into chunks or between workers.
"""

from __future__ import annotations

import logging
from typing import Literal

import numpy as np
from numpy.typing import NDArray

logger = logging.getLogger(__name__)

DenseMatrix = NDArray[np.float64]

ActivationKind = Literal["identity", "relu", "gelu"]
ActivationMode = Literal["forward", "grad"]
ACTIVATIONS: tuple[str, ...] = ("identity", "relu", "gelu")

# Upper bound on the number of partial products held in memory at once.
_CHUNK_ELEMENTS = 1 << 22

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes don't agree."""


def as_dense(a, name: str = "matrix") -> DenseMatrix:
    """Return `a` as a 2-D float64 array (no copy when it already is one)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(
    a: DenseMatrix,
    b: DenseMatrix,
    transpose_a: bool = False,
    transpose_b: bool = False,
) -> DenseMatrix:
    """Return op(a) @ op(b) with a fixed ascending-inner-index summation order."""
    a = as_dense(a, "a")
    b = as_dense(b, "b")
    a_eff = a.T if transpose_a else a
    b_eff = b.T if transpose_b else b
    m, k = a_eff.shape
    k_b, n = b_eff.shape
    if k != k_b:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a_eff.shape} x {b_eff.shape}"
        )
    out = np.zeros((m, n), dtype=np.float64)
    if m == 0 or n == 0 or k == 0:
        return out

    rows_per_chunk = max(1, _CHUNK_ELEMENTS // (k * n))
    for start in range(0, m, rows_per_chunk):
        stop = min(start + rows_per_chunk, m)
        products = a_eff[start:stop, :, None] * b_eff[None, :, :]
        # cumsum is a sequential accumulate; its last slice is the ordered sum.
        # Adding 0.0 turns a -0.0 total into the +0.0 a sum started at 0.0 gives.
        out[start:stop] = np.cumsum(products, axis=1)[:, -1, :] + 0.0
    return out


def softmax_rows(a: DenseMatrix) -> DenseMatrix:
    """Row-wise softmax with max subtraction."""
    a = as_dense(a)
    if a.size == 0:
        raise ShapeError(f"softmax_rows needs a non-empty matrix, got shape {a.shape}")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def activation(
    kind: ActivationKind,
    a: DenseMatrix,
    mode: ActivationMode = "forward",
) -> DenseMatrix:
    """Apply an elementwise activation, or its derivative when mode="grad".

    In grad mode `a` holds pre-activation values. gelu is the tanh
    approximation.
    """
    a = np.asarray(a, dtype=np.float64)
    if mode not in ("forward", "grad"):
        raise ValueError(f"unknown activation mode: {mode!r}")

    if kind == "identity":
        return a.copy() if mode == "forward" else np.ones_like(a)
    if kind == "relu":
        if mode == "forward":
            return np.maximum(a, 0.0)
        return (a > 0.0).astype(np.float64)
    if kind == "gelu":
        inner = _GELU_C * (a + _GELU_A * a**3)
        t = np.tanh(inner)
        if mode == "forward":
            return 0.5 * a * (1.0 + t)
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * a**2)
        return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner
    raise ValueError(f"unknown activation kind: {kind!r} (expected one of {ACTIVATIONS})")
