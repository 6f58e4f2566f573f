"""Dense/sparse linear algebra, reverse-mode autodiff and Adam."""

from .adam import AdamState, adam_step
from .sparse import SparseMatrix, spmm_values
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    exp,
    leaky_relu,
    logsumexp_rows,
    matmul,
    mul,
    relu,
    row_dot,
    row_normalize,
    spmm,
    sum_rows,
    take_rows,
    total,
    transpose,
    zeros,
)

__all__ = [
    "AdamState", "SparseMatrix", "Tensor", "adam_step", "add", "as_tensor", "backward",
    "exp", "leaky_relu", "logsumexp_rows", "matmul", "mul", "relu", "row_dot",
    "row_normalize", "spmm", "spmm_values", "sum_rows", "take_rows", "total",
    "transpose", "zeros",
]
