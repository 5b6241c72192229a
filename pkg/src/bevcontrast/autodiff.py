"""A small reverse-mode differentiation tape over float64 numpy arrays.

Every forward op appends a node ``(op, parent ids, vjp)`` to the tape of its
operands; :func:`backward` walks the nodes in descending id order, which makes
gradient accumulation order fixed and results bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError, ShapeError


class Tensor:
    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"


@dataclass
class Node:
    op: str
    parents: tuple
    vjp: object  # callable(grad) -> tuple of parent grads, or None for leaves


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self._bound = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data, op="leaf") -> Tensor:
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, op)
        self.nodes.append(Node(op, (), None))
        return Tensor(arr, self, len(self.nodes) - 1)

    def bind(self, key, arrays):
        """Leaves for a parameter set, created once per tape and reused after."""
        k = id(key)
        if k not in self._bound:
            self._bound[k] = (key, [self.leaf(a, op="param") for a in arrays])
        return self._bound[k][1]

    def record(self, op, data, parents, vjp) -> Tensor:
        _check_finite(data, op)
        ids = tuple(p.node_id for p in parents)
        self.nodes.append(Node(op, ids, vjp))
        return Tensor(data, self, len(self.nodes) - 1)


def constant(data) -> Tensor:
    """An untracked tensor; gradients never flow into it."""
    arr = np.array(data, dtype=np.float64)
    _check_finite(arr, "constant")
    return Tensor(arr)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise DataError(f"non-finite value produced by {op}")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else constant(x)


def _emit(op, data, operands, vjp):
    """Record on the operands' tape, or return a constant if none is tracked."""
    tapes = {id(t.tape): t.tape for t in operands if t.tape is not None}
    if not tapes:
        _check_finite(data, op)
        return Tensor(data)
    if len(tapes) > 1:
        raise ContractError(f"{op}: operands live on different tapes")
    tape = next(iter(tapes.values()))
    tracked = [t for t in operands if t.tape is not None]
    mask = [t.tape is not None for t in operands]

    def tracked_vjp(g):
        grads = vjp(g)
        return tuple(gr for gr, m in zip(grads, mask) if m)

    return tape.record(op, data, tracked, tracked_vjp)


def _shape_error(op, a, b):
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape).copy()
    except ValueError:
        raise _shape_error("reshape", old, shape) from None
    return _emit("reshape", data, (a,), lambda g: (g.reshape(old),))


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _emit("add_row", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise _shape_error("add", a.shape, b.shape)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def reduce_sum(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit("reduce_sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def reduce_mean_by_group(x, groups, n_groups) -> tuple[Tensor, np.ndarray]:
    """Average the rows of ``x`` sharing a group id; ids of -1 are dropped.

    Returns ``(means, counts)``; empty groups get a zero row. Rows are summed
    in a canonical order (group, then row values), so the result does not
    depend on the input row order.
    """
    x = _as_tensor(x)
    groups = np.asarray(groups, dtype=np.int64)
    if x.data.ndim != 2 or groups.shape != (x.shape[0],):
        raise _shape_error("reduce_mean_by_group", x.shape, groups.shape)
    if groups.size and (groups.max() >= n_groups or groups.min() < -1):
        raise ContractError("reduce_mean_by_group: group id out of range")
    X = x.data
    keep = np.flatnonzero(groups >= 0)
    g_keep = groups[keep]
    counts = np.bincount(g_keep, minlength=n_groups).astype(np.int64)
    out = np.zeros((n_groups, X.shape[1]))
    if keep.size:
        # lexsort: last key is primary
        keys = tuple(X[keep, c] for c in range(X.shape[1] - 1, -1, -1)) + (g_keep,)
        order = keep[np.lexsort(keys)]
        g_sorted = groups[order]
        starts = np.flatnonzero(np.r_[True, g_sorted[1:] != g_sorted[:-1]])
        occupied = g_sorted[starts]
        sums = np.add.reduceat(X[order], starts, axis=0)
        out[occupied] = sums / counts[occupied, None]
    inv = np.zeros(n_groups)
    nz = counts > 0
    inv[nz] = 1.0 / counts[nz]

    def vjp(g):
        gx = np.zeros_like(X)
        gx[keep] = g[g_keep] * inv[g_keep, None]
        return (gx,)

    return _emit("reduce_mean_by_group", out, (x,), vjp), counts


def l2_normalize_rows(x, eps=1e-12) -> Tensor:
    """Divide each row by ``max(||row||, eps)``."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected 2-D, got {x.shape}")
    X = x.data
    norm = np.sqrt(np.einsum("ij,ij->i", X, X))
    denom = np.maximum(norm, eps)
    Y = X / denom[:, None]
    big = norm > eps

    def vjp(g):
        proj = np.einsum("ij,ij->i", Y, g)
        gx = g - np.where(big, proj, 0.0)[:, None] * Y
        return (gx / denom[:, None],)

    return _emit("l2_normalize_rows", Y, (x,), vjp)


def log_sum_exp_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"log_sum_exp_rows: expected 2-D, got {x.shape}")
    X = x.data
    m = X.max(axis=1, keepdims=True)
    e = np.exp(X - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return _emit("log_sum_exp_rows", out, (x,), lambda g: (soft * g[:, None],))


def gather_rows(x, idx) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or idx.ndim != 1:
        raise _shape_error("gather_rows", x.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError("gather_rows: index out of range")
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("gather_rows", x.data[idx], (x,), vjp)


def row_mix(x, idx, weights) -> Tensor:
    """``out[r] = sum_k weights[r, k] * x[idx[r, k]]``; entries with ``idx < 0`` contribute zero.

    A linear resampling of rows; used for grid warping.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    if x.data.ndim != 2 or idx.ndim != 2 or idx.shape != w.shape:
        raise _shape_error("row_mix", idx.shape, w.shape)
    valid = idx >= 0
    w = np.where(valid, w, 0.0)
    safe = np.where(valid, idx, 0)
    X = x.data
    out = np.zeros((idx.shape[0], X.shape[1]))
    for k in range(idx.shape[1]):
        out += w[:, k, None] * X[safe[:, k]]

    def vjp(g):
        gx = np.zeros_like(X)
        for k in range(idx.shape[1]):
            sel = valid[:, k]
            np.add.at(gx, safe[sel, k], w[sel, k, None] * g[sel])
        return (gx,)

    return _emit("row_mix", out, (x,), vjp)


def backward(tape: Tape, loss: Tensor) -> dict:
    """Gradients of the scalar ``loss`` for every node it depends on, keyed by node id."""
    if loss.tape is not tape or loss.node_id is None:
        raise ContractError("loss is not recorded on this tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.array(pg, dtype=np.float64)
    return grads


def grad_of(grads, t: Tensor):
    """Gradient for tensor ``t`` (zeros if the loss does not depend on it)."""
    g = grads.get(t.node_id)
    return np.zeros(t.shape) if g is None else g
