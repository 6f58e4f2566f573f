"""Dense product kernel with a fixed accumulation order."""

import numpy as np

from ..errors import DimensionError


def matmul_values(a, b):
    """``a @ b`` accumulated over the inner index in ascending order.

    Each output entry is ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)`` with every
    product rounded before it is added, the same order the CSR kernel uses
    for its stored entries. Skipped zeros leave a partial sum unchanged, so
    sparse and dense products agree bit for bit.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[k]
    return out
