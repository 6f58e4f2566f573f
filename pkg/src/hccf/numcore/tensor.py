"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation on :class:`Tensor` records a node holding its parents and a
closure mapping the output gradient to parent gradients.  :func:`backward`
walks the recorded graph in reverse topological order.

Summation order: products accumulate over the inner index in ascending
order (:func:`matmul_values`, and the CSR kernel for sparse operands);
reductions use numpy's pairwise summation along the reduced axis; row
scatters use ``np.add.at``, which applies updates in index order.  None of
these depends on thread count, so passes are bit-repeatable.
"""

from __future__ import annotations

import logging

import numpy as np

from ..errors import ContractError, DimensionError
from .dense import matmul_values
from .sparse import SparseMatrix, spmm_values

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.5


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self.op = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        label = self.name or self.op or "leaf"
        return f"Tensor({label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward, op):
    out = Tensor(value)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    # only row-vector (1, n) and scalar (1, 1) broadcasting is supported
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


def _check_broadcast(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb or a.value.size == 1 or b.value.size == 1:
        return
    if len(sa) == len(sb) == 2 and sa[1] == sb[1] and 1 in (sa[0], sb[0]):
        return
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a):
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    """Elementwise product (row-vector and scalar broadcasting allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _node(matmul_values(av, bv), (a, b),
                 lambda g: (matmul_values(g, bv.T), matmul_values(av.T, g)), "matmul")


def spmm(a: SparseMatrix, b, a_t: SparseMatrix | None = None):
    """Constant sparse matrix times a dense tensor.

    ``a_t`` may carry a precomputed transpose used for the backward product.
    """
    b = as_tensor(b)
    value = spmm_values(a, b.value)

    def backward(g):
        at = a_t if a_t is not None else a.transpose()
        return (spmm_values(at, g),)

    return _node(value, (b,), backward, "spmm")


def transpose(a):
    return _node(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def leaky_relu(x, slope=LEAKY_SLOPE):
    """``v`` for ``v >= 0`` else ``slope * v``; derivative taken as 1 at 0."""
    x = as_tensor(x)
    factor = np.where(x.value >= 0, 1.0, slope)
    return _node(x.value * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def relu(x):
    """Hinge ``max(0, v)``; derivative taken as 0 at the kink."""
    x = as_tensor(x)
    active = (x.value > 0).astype(np.float64)
    return _node(x.value * active, (x,), lambda g: (g * active,), "relu")


def exp(x):
    v = np.exp(x.value)
    return _node(v, (x,), lambda g: (g * v,), "exp")


def log_(x):
    xv = x.value
    return _node(np.log(xv), (x,), lambda g: (g / xv,), "log")


def total(x):
    """Sum of all entries, as a 1x1 tensor."""
    x = as_tensor(x)
    shape = x.shape
    return _node(np.array([[x.value.sum()]]), (x,),
                 lambda g: (np.broadcast_to(g.reshape(-1)[0], shape).copy(),), "sum")


def sum_rows(x):
    """Row sums as a column ``(m, 1)``."""
    n = x.shape[1]
    return _node(x.value.sum(axis=1, keepdims=True), (x,),
                 lambda g: (np.repeat(g, n, axis=1),), "sum_rows")


def take_rows(x, index):
    """Gather rows ``x[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for {x.shape[0]} rows")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(x.value[index], (x,), backward, "take_rows")


def row_dot(a, b):
    """Per-row inner products of equally shaped matrices, as ``(m, 1)``."""
    if a.shape != b.shape:
        raise DimensionError(f"row_dot: shapes {a.shape} and {b.shape} differ")
    return sum_rows(mul(a, b))


def row_normalize(x):
    """Scale every row to unit L2 norm.  All-zero rows map to zero rows."""
    x = as_tensor(x)
    norms = np.sqrt((x.value ** 2).sum(axis=1, keepdims=True))
    zero = norms == 0
    if zero.any():
        log.debug("row_normalize: %d zero-norm rows treated as zero vectors", int(zero.sum()))
    safe = np.where(zero, 1.0, norms)
    y = x.value / safe

    def backward(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * proj) / safe,)

    return _node(y, (x,), backward, "row_normalize")


def logsumexp_rows(x):
    """Max-shifted log-sum-exp of every row, as ``(m, 1)``."""
    xv = x.value
    shift = xv.max(axis=1, keepdims=True)
    e = np.exp(xv - shift)
    s = e.sum(axis=1, keepdims=True)
    soft = e / s
    return _node(np.log(s) + shift, (x,), lambda g: (g * soft,), "logsumexp_rows")


def zeros(shape):
    return Tensor(np.zeros(shape))


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every reachable leaf with ``requires_grad``.

    Returns a dict mapping each such leaf to its gradient.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    leaves = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
                leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves
