"""Sparse kernels and a small define-by-run reverse-mode tape.

Dense matrices are plain 2-D ``float64`` numpy arrays. Sparse matrices are
immutable compressed-row containers; gradients never flow into them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable
import weakref

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeStateError(RuntimeError):
    """Tape used out of order (backward twice, backward on a foreign node...)."""


class SparseMatrix:
    """Immutable CSR matrix.

    The arrays are validated on construction and marked read-only. Products
    are delegated to scipy's CSR kernel.
    """

    __slots__ = ("rows", "cols", "indptr", "indices", "data", "_csr", "_csr_t")

    def __init__(self, rows: int, cols: int, indptr, indices, data):
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        data = np.asarray(data, dtype=np.float64)
        if rows < 0 or cols < 0:
            raise ShapeError(f"negative shape ({rows}, {cols})")
        if indptr.shape != (rows + 1,):
            raise ShapeError(f"indptr must have {rows + 1} entries, got {indptr.shape}")
        if indptr[0] != 0 or np.any(np.diff(indptr) < 0) or indptr[-1] != len(indices):
            raise ValueError("indptr must start at 0, be non-decreasing and end at nnz")
        if len(indices) != len(data):
            raise ValueError("indices and data length differ")
        if len(indices):
            if indices.min() < 0 or indices.max() >= cols:
                raise ValueError("column index out of range")
            # strictly increasing within rows: a non-positive step is only
            # allowed where a new row starts
            steps = np.diff(indices)
            row_starts = np.zeros(len(indices), dtype=bool)
            row_starts[indptr[1:-1][indptr[1:-1] < len(indices)]] = True
            if np.any((steps <= 0) & ~row_starts[1:]):
                raise ValueError("column indices must be strictly increasing within a row")
        if not np.all(np.isfinite(data)):
            raise ValueError("sparse values must be finite")
        for a in (indptr, indices, data):
            a.setflags(write=False)
        self.rows, self.cols = int(rows), int(cols)
        self.indptr, self.indices, self.data = indptr, indices, data
        self._csr = sp.csr_matrix((data, indices, indptr), shape=(rows, cols))
        self._csr_t = None

    @classmethod
    def from_coo(cls, rows: int, cols: int, r, c, v=None) -> "SparseMatrix":
        """Build from triplets; duplicate coordinates are summed."""
        r = np.asarray(r, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        v = np.ones(len(r)) if v is None else np.asarray(v, dtype=np.float64)
        if len(r) and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
            raise ValueError("coordinate out of range")
        m = sp.csr_matrix((v, (r, c)), shape=(rows, cols))
        m.sum_duplicates()
        m.sort_indices()
        return cls(rows, cols, m.indptr, m.indices, m.data)

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.data)

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self._csr.T)

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr.copy()

    def matmul(self, d: np.ndarray) -> np.ndarray:
        return spmm(self, d)

    def rmatmul_t(self, d: np.ndarray) -> np.ndarray:
        """``self.T @ d`` without materializing the transpose more than once."""
        if self._csr_t is None:
            self._csr_t = self._csr.T.tocsr()
        return np.asarray(self._csr_t @ d)

    def __repr__(self) -> str:
        return f"SparseMatrix({self.rows}x{self.cols}, nnz={self.nnz})"


def spmm(s: SparseMatrix, d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or s.cols != d.shape[0]:
        raise ShapeError(f"spmm: {s.shape} x {d.shape}")
    return np.asarray(s._csr @ d)


# --------------------------------------------------------------------------
# reverse-mode tape
# --------------------------------------------------------------------------


@dataclass(eq=False)
class Node:
    value: np.ndarray
    requires_grad: bool = False
    name: str | None = None
    grad: np.ndarray | None = None
    _backward: Callable[[np.ndarray], None] | None = field(default=None, repr=False)
    _tape_ref: "weakref.ref | None" = field(default=None, repr=False)
    _owns_grad: bool = field(default=False, repr=False)

    @property
    def _tape(self) -> "Tape | None":
        return None if self._tape_ref is None else self._tape_ref()

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


def _as2d(x) -> np.ndarray:
    a = np.array(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"only 2-D values are supported, got shape {a.shape}")
    return a


def _acc(node: Node, g: np.ndarray) -> None:
    # the first contribution is stored without copying; it may be shared
    # with another node, so later contributions never add in place into it
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g
        node._owns_grad = False
    elif node._owns_grad:
        node.grad += g
    else:
        node.grad = node.grad + g
        node._owns_grad = True


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Node, b: Node, op: str) -> None:
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


class Tape:
    """Records operations on 2-D nodes; ``backward`` replays them in reverse.

    One tape per training step. Leaves created with :meth:`param` receive
    gradients; :meth:`const` leaves do not.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    # leaves -------------------------------------------------------------
    def param(self, value, name: str | None = None) -> Node:
        return self._leaf(value, True, name)

    def const(self, value, name: str | None = None) -> Node:
        return self._leaf(value, False, name)

    def _leaf(self, value, requires_grad, name):
        n = Node(_as2d(value), requires_grad=requires_grad, name=name, _tape_ref=weakref.ref(self))
        self.nodes.append(n)
        return n

    def _record(self, value, parents, backward) -> Node:
        if self._consumed:
            raise TapeStateError("tape already consumed by backward()")
        for p in parents:
            if p._tape is not self:
                raise TapeStateError("operand belongs to a different tape")
        rg = any(p.requires_grad for p in parents)
        n = Node(value, requires_grad=rg, _tape_ref=weakref.ref(self))
        if rg:
            n._backward = backward
        self.nodes.append(n)
        return n

    # primitives -----------------------------------------------------------
    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} x {b.shape}")
        out = None

        def back(g):
            _acc(a, g @ b.value.T)
            _acc(b, a.value.T @ g)

        out = self._record(a.value @ b.value, (a, b), back)
        return out

    def spmm(self, s: SparseMatrix, a: Node) -> Node:
        """Sparse structure times dense node; gradient flows into ``a`` only."""
        value = spmm(s, a.value)

        def back(g):
            _acc(a, s.rmatmul_t(g))

        return self._record(value, (a,), back)

    def add(self, a: Node, b: Node) -> Node:
        _broadcast_shape(a, b, "add")

        def back(g):
            _acc(a, _unbroadcast(g, a.shape))
            _acc(b, _unbroadcast(g, b.shape))

        return self._record(a.value + b.value, (a, b), back)

    def sub(self, a: Node, b: Node) -> Node:
        _broadcast_shape(a, b, "sub")

        def back(g):
            _acc(a, _unbroadcast(g, a.shape))
            _acc(b, -_unbroadcast(g, b.shape))

        return self._record(a.value - b.value, (a, b), back)

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise product with numpy broadcasting."""
        _broadcast_shape(a, b, "mul")

        def back(g):
            _acc(a, _unbroadcast(g * b.value, a.shape))
            _acc(b, _unbroadcast(g * a.value, b.shape))

        return self._record(a.value * b.value, (a, b), back)

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)

        def back(g):
            _acc(a, g * c)

        return self._record(a.value * c, (a,), back)

    def mask(self, a: Node, m: np.ndarray) -> Node:
        """Multiply by a constant array (dropout masks, feature masks)."""
        m = np.asarray(m, dtype=np.float64)

        def back(g):
            _acc(a, _unbroadcast(g * m, a.shape))

        return self._record(a.value * m, (a,), back)

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)

        def back(g):
            _acc(a, g * (1.0 - y * y))

        return self._record(y, (a,), back)

    def relu(self, a: Node) -> Node:
        pos = a.value > 0

        def back(g):
            _acc(a, g * pos)

        # np.maximum keeps NaN so divergence surfaces in the loss
        return self._record(np.maximum(a.value, 0.0), (a,), back)

    def softmax(self, a: Node) -> Node:
        """Row-wise softmax."""
        z = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)

        def back(g):
            _acc(a, y * (g - (g * y).sum(axis=1, keepdims=True)))

        return self._record(y, (a,), back)

    def sum(self, a: Node) -> Node:
        def back(g):
            _acc(a, np.broadcast_to(g, a.shape).copy())

        return self._record(np.array([[a.value.sum()]]), (a,), back)

    def mean(self, a: Node, axis: int | None = None) -> Node:
        if axis is None:
            n = a.value.size

            def back(g):
                _acc(a, np.broadcast_to(g / n, a.shape).copy())

            return self._record(np.array([[a.value.mean()]]), (a,), back)
        n = a.shape[axis]

        def back_axis(g):
            _acc(a, np.broadcast_to(g / n, a.shape).copy())

        return self._record(a.value.mean(axis=axis, keepdims=True), (a,), back_axis)

    def rows(self, a: Node, idx) -> Node:
        """Gather rows (repeats allowed)."""
        idx = np.asarray(idx, dtype=np.int64)
        if len(idx) and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise IndexError("row index out of range")

        n = a.shape[0]

        def back(g):
            if a.requires_grad:
                scatter = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
                _acc(a, np.asarray(scatter @ g))

        return self._record(a.value[idx], (a,), back)

    def slice_rows(self, a: Node, start: int, stop: int) -> Node:
        """Contiguous row block ``a[start:stop]``."""
        if not 0 <= start <= stop <= a.shape[0]:
            raise IndexError(f"row slice [{start}:{stop}] out of range for {a.shape}")

        def back(g):
            if a.requires_grad:
                full = np.zeros_like(a.value)
                full[start:stop] = g
                _acc(a, full)

        return self._record(a.value[start:stop], (a,), back)

    def cols(self, a: Node, idx) -> Node:
        idx = np.asarray(idx, dtype=np.int64)

        def back(g):
            if a.requires_grad:
                full = np.zeros_like(a.value)
                np.add.at(full.T, idx, g.T)
                _acc(a, full)

        return self._record(a.value[:, idx], (a,), back)

    def vstack(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[1]:
            raise ShapeError(f"vstack: {a.shape} over {b.shape}")
        na = a.shape[0]

        def back(g):
            _acc(a, g[:na])
            _acc(b, g[na:])

        return self._record(np.vstack([a.value, b.value]), (a, b), back)

    def hstack(self, a: Node, b: Node) -> Node:
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"hstack: {a.shape} beside {b.shape}")
        na = a.shape[1]

        def back(g):
            _acc(a, g[:, :na])
            _acc(b, g[:, na:])

        return self._record(np.hstack([a.value, b.value]), (a, b), back)

    def row_dot(self, a: Node, b: Node) -> Node:
        """Per-row inner products, returned as a column."""
        if a.shape != b.shape:
            raise ShapeError(f"row_dot: {a.shape} vs {b.shape}")

        def back(g):
            _acc(a, g * b.value)
            _acc(b, g * a.value)

        return self._record((a.value * b.value).sum(axis=1, keepdims=True), (a, b), back)

    def l2_normalize(self, a: Node, eps: float = 1e-12) -> Node:
        """Row-wise x / max(|x|, eps); rows at or below eps are scaled, not projected."""
        raw = np.linalg.norm(a.value, axis=1, keepdims=True)
        clamped = raw <= eps
        norms = np.where(clamped, eps, raw)
        y = a.value / norms

        def back(g):
            proj = g - np.where(clamped, 0.0, y * (g * y).sum(axis=1, keepdims=True))
            _acc(a, proj / norms)

        return self._record(y, (a,), back)

    def bce_with_logits(self, logits: Node, labels) -> Node:
        """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels."""
        y = _as2d(labels).reshape(logits.shape)
        x = logits.value
        # log(1 + exp(-|x|)) formulation avoids overflow
        loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
        n = x.size
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))

        def back(g):
            _acc(logits, g * (sig - y) / n)

        return self._record(np.array([[loss.mean()]]), (logits,), back)

    def logsumexp(self, a: Node, include=None) -> Node:
        """Row-wise log-sum-exp over entries where ``include`` is True."""
        inc = np.ones(a.shape, dtype=bool) if include is None else np.asarray(include, dtype=bool)
        if inc.shape != a.shape:
            raise ShapeError("logsumexp mask shape mismatch")
        if not np.all(inc.any(axis=1)):
            raise ValueError("logsumexp: a row has no included entries")
        masked = np.where(inc, a.value, -np.inf)
        m = masked.max(axis=1, keepdims=True)
        e = np.where(inc, np.exp(masked - m), 0.0)
        s = e.sum(axis=1, keepdims=True)
        p = e / s

        def back(g):
            _acc(a, g * p)

        return self._record(m + np.log(s), (a,), back)

    def diag(self, a: Node) -> Node:
        """Diagonal of a square node as a column."""
        if a.shape[0] != a.shape[1]:
            raise ShapeError("diag needs a square matrix")
        n = a.shape[0]

        def back(g):
            full = np.zeros_like(a.value)
            full[np.arange(n), np.arange(n)] = g[:, 0]
            _acc(a, full)

        return self._record(np.diag(a.value).reshape(-1, 1).copy(), (a,), back)

    def transpose(self, a: Node) -> Node:
        def back(g):
            _acc(a, g.T)

        return self._record(a.value.T.copy(), (a,), back)

    # reverse sweep ------------------------------------------------------
    def backward(self, loss: Node) -> None:
        if self._consumed:
            raise TapeStateError("backward() already ran on this tape")
        if loss._tape is not self:
            raise TapeStateError("loss was not recorded on this tape")
        if loss.shape != (1, 1):
            raise ValueError(f"loss must be a scalar node, got shape {loss.shape}")
        for n in self.nodes:
            n.grad = None
        self._consumed = True
        if loss.requires_grad:
            loss.grad = np.ones((1, 1))
            for n in reversed(self.nodes):
                if n._backward is not None and n.grad is not None:
                    n._backward(n.grad)
        for n in self.nodes:
            if n.requires_grad and n.grad is None:
                n.grad = np.zeros_like(n.value)
            elif n.grad is not None and not n._owns_grad and n._backward is None:
                # leaves hand their gradient to callers: make it private
                n.grad = np.array(n.grad)
                n._owns_grad = True


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function; used as a test oracle."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g
