"""Compressed-sparse-row matrices.

Storage follows the usual CSR triple (``indptr``, ``indices``, ``data``) with
column indices strictly increasing inside each row.  Products are delegated
to :mod:`scipy.sparse`, whose CSR kernel accumulates each output row
sequentially in stored column order, so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..errors import ContractError, DimensionError


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        if indptr.shape != (self.rows + 1,) or indptr[0] != 0:
            raise ContractError("indptr must have rows+1 entries starting at 0")
        if np.any(np.diff(indptr) < 0):
            raise ContractError("indptr must be nondecreasing")
        if indptr[-1] != len(indices) or len(indices) != len(data):
            raise ContractError("nnz disagrees between indptr, indices and data")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.cols):
            raise ContractError("column index out of range")
        rows = np.repeat(np.arange(self.rows), np.diff(indptr))
        same_row = rows[1:] == rows[:-1]
        if np.any(np.diff(indices)[same_row] <= 0):
            raise ContractError("column indices must be strictly increasing within each row")

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self):
        return int(self.indptr[-1])

    @classmethod
    def from_coo(cls, rows, cols, row_idx, col_idx, values=None):
        """Build from coordinate triples.  Duplicate coordinates are summed."""
        row_idx = np.asarray(row_idx, dtype=np.int64)
        col_idx = np.asarray(col_idx, dtype=np.int64)
        if values is None:
            values = np.ones(len(row_idx))
        m = sp.coo_matrix((np.asarray(values, dtype=np.float64), (row_idx, col_idx)),
                          shape=(rows, cols)).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        return cls._from_scipy(m)

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls.from_coo(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @classmethod
    def identity(cls, n):
        idx = np.arange(n)
        return cls(n, n, np.arange(n + 1), idx, np.ones(n))

    @classmethod
    def _from_scipy(cls, m):
        m = m.tocsr()
        if not m.has_sorted_indices:
            m = m.sorted_indices()
        return cls(m.shape[0], m.shape[1], m.indptr.copy(), m.indices.copy(), m.data.copy())

    def to_scipy(self):
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def densify(self):
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(self.rows), np.diff(self.indptr))
        out[rows, self.indices] = self.data
        return out

    def row_of_entries(self):
        """Row index of every stored entry, aligned with ``indices``."""
        return np.repeat(np.arange(self.rows), np.diff(self.indptr))

    def transpose(self):
        return SparseMatrix._from_scipy(self.to_scipy().T.tocsr())

    def with_data(self, data):
        return SparseMatrix(self.rows, self.cols, self.indptr, self.indices, data)

    def select(self, keep):
        """Keep only the stored entries where boolean ``keep`` is true."""
        keep = np.asarray(keep, dtype=bool)
        counts = np.bincount(self.row_of_entries()[keep], minlength=self.rows)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return SparseMatrix(self.rows, self.cols, indptr, self.indices[keep], self.data[keep])


def spmm_values(a: SparseMatrix, b: np.ndarray) -> np.ndarray:
    """Sparse-times-dense product on raw arrays."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2 or a.cols != b.shape[0]:
        raise DimensionError(f"spmm: cannot multiply {a.shape} by {b.shape}")
    if a.nnz == 0:
        return np.zeros((a.rows, b.shape[1]))
    return np.asarray(a.to_scipy() @ b)
