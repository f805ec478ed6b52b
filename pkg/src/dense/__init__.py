"""Dense 2-D float64 matrix substrate."""

from src.dense.ops import (
    ACTIVATIONS,
    DenseMatrix,
    ShapeError,
    activation,
    as_dense,
    matmul,
    softmax_rows,
)

__all__ = [
    "ACTIVATIONS",
    "DenseMatrix",
    "ShapeError",
    "activation",
    "as_dense",
    "matmul",
    "softmax_rows",
]
