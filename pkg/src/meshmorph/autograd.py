"""A small tape-based reverse-mode autodiff over float64 numpy arrays.

Only the operations the mesh models need are provided.  Operations record
onto the innermost active :class:`Tape` whenever one of their inputs
requires a gradient; outside a tape they simply compute values.

Feature arrays follow a vertex-major layout ``(n_vertices, batch, dim)``:
:func:`matmul` and :func:`spmm` contract the leading axis, :func:`linear`
contracts the trailing one.
"""
from __future__ import annotations

import os
import weakref
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


# Finite-output assertions on every recorded op; off by default for speed.
DEBUG = bool(os.environ.get("MESHMORPH_DEBUG"))


class ShapeError(ValueError):
    """Operand shapes are incompatible for the named operation."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._tape = None

    @property
    def tape(self) -> "Tape | None":
        """The tape that recorded this value (``None`` for leaves)."""
        # held weakly: a strong reference would form a tape <-> output cycle
        # that keeps large arrays alive until the cyclic collector runs
        return self._tape() if self._tape is not None else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.size != 1:
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward", "kind")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of operations; recording order is a topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None):
        return backward(self, loss, params)


def _record(kind: str, inputs: Sequence[Tensor], out: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = np.asarray(out, dtype=np.float64)
    result.requires_grad = False
    result.name = None
    result.grad = None
    result._tape = None
    if DEBUG and not np.all(np.isfinite(out)) and all(np.all(np.isfinite(t.data)) for t in inputs):
        raise FloatingPointError(f"{kind}: non-finite output from finite inputs")
    if _ACTIVE and any(t.requires_grad for t in inputs):
        tape = _ACTIVE[-1]
        result.requires_grad = True
        result._tape = weakref.ref(tape)
        tape.nodes.append(_Node(kind, tuple(inputs), result, backward_fn))
    return result


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None):
    """Reverse accumulation from a scalar ``loss``.

    Returns a list of gradients aligned with ``params`` (zeros for unused
    parameters) and stores each on ``param.grad``.  With ``params=None`` a
    dict keyed by leaf tensor id is returned instead.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.tape is None:
                leaves[id(t)] = t
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if params is None:
        return {k: grads[k] for k in leaves}
    out = []
    for p in params:
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        p.grad = g
        out.append(g)
    return out


def _check(cond: bool, op: str, msg: str):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(m, k) @ (k, ...)`` -> ``(m, ...)``; both operands differentiable."""
    a, b = as_tensor(a), as_tensor(b)
    _check(a.data.ndim == 2, "matmul", f"left operand must be 2-D, got {a.shape}")
    _check(b.data.ndim >= 1 and a.shape[1] == b.shape[0], "matmul",
           f"cannot contract {a.shape} with {b.shape}")
    rest = b.shape[1:]
    b2 = b.data.reshape(b.shape[0], -1)
    out = (a.data @ b2).reshape((a.shape[0],) + rest)

    def bw(g):
        g2 = g.reshape(a.shape[0], -1)
        return g2 @ b2.T, (a.data.T @ g2).reshape(b.shape)

    return _record("matmul", (a, b), out, bw)


def spmm(s: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse ``(m, k)`` times dense ``(k, ...)``."""
    x = as_tensor(x)
    _check(s.shape[1] == x.shape[0], "spmm", f"cannot contract {s.shape} with {x.shape}")
    rest = x.shape[1:]
    x2 = x.data.reshape(x.shape[0], -1)
    out = np.asarray(s @ x2).reshape((s.shape[0],) + rest)

    def bw(g):
        return (np.asarray(s.T @ g.reshape(s.shape[0], -1)).reshape(x.shape),)

    return _record("spmm", (x,), out, bw)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``(..., k) @ (k, p)`` -> ``(..., p)``."""
    x, w = as_tensor(x), as_tensor(w)
    _check(w.data.ndim == 2 and x.shape[-1] == w.shape[0], "linear",
           f"cannot apply weight {w.shape} to {x.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = (x2 @ w.data).reshape(x.shape[:-1] + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2

    return _record("linear", (x, w), out, bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a ``(p,)`` bias along the trailing axis."""
    x, b = as_tensor(x), as_tensor(b)
    _check(b.data.ndim == 1 and x.shape[-1] == b.shape[0], "add_bias",
           f"bias {b.shape} does not match {x.shape}")
    out = x.data + b.data

    def bw(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _record("add_bias", (x, b), out, bw)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, "add", f"shape mismatch {a.shape} vs {b.shape}")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, "sub", f"shape mismatch {a.shape} vs {b.shape}")
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal shapes."""
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, "mul", f"shape mismatch {a.shape} vs {b.shape}")
    return _record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, alpha) -> Tensor:
    """Multiply by a Python scalar or a one-element Tensor."""
    x = as_tensor(x)
    if isinstance(alpha, Tensor):
        _check(alpha.size == 1, "scale", f"scale factor must have one element, got {alpha.shape}")
        a = alpha.data.reshape(())
        return _record("scale", (x, alpha), x.data * a,
                       lambda g: (g * a, np.sum(g * x.data).reshape(alpha.shape)))
    a = float(alpha)
    return _record("scale", (x,), x.data * a, lambda g: (g * a,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _record("add_scalar", (x,), x.data + float(c), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _record("relu", (x,), np.where(pos, x.data, 0.0), lambda g: (g * pos,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    x = as_tensor(x)
    keep = x.data > lo
    return _record("clamp_min", (x,), np.where(keep, x.data, lo), lambda g: (g * keep,))


def div_rows(x: Tensor, v: Tensor) -> Tensor:
    """Divide row ``i`` of ``x`` (all trailing entries) by ``v[i]``."""
    x, v = as_tensor(x), as_tensor(v)
    _check(v.data.ndim == 1 and v.shape[0] == x.shape[0], "div_rows",
           f"divisor {v.shape} does not match rows of {x.shape}")
    vb = v.data.reshape((-1,) + (1,) * (x.data.ndim - 1))
    out = x.data / vb

    def bw(g):
        gx = g / vb
        gv = -(g * out).reshape(x.shape[0], -1).sum(axis=1) / v.data
        return gx, gv

    return _record("div_rows", (x, v), out, bw)


# ---------------------------------------------------------------- indexing / shape


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows of ``x`` selected by an integer array; ``-1`` yields a zero row.

    Output shape is ``index.shape + x.shape[1:]``.
    """
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.max() >= n or idx.min() < -1):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    padded = np.concatenate([x.data, np.zeros((1,) + x.shape[1:])], axis=0)
    safe = np.where(idx < 0, n, idx)
    out = padded[safe]

    def bw(g):
        flat = safe.ravel()
        g2 = g.reshape((flat.size, -1))
        acc = np.zeros((n + 1, g2.shape[1]))
        np.add.at(acc, flat, g2)
        return (acc[:n].reshape(x.shape),)

    return _record("gather_rows", (x,), out, bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _record("transpose", (x,), out, lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].data.ndim
    for t in ts[1:]:
        _check(t.data.ndim == ts[0].data.ndim and
               t.shape[:ax] + t.shape[ax + 1:] == ts[0].shape[:ax] + ts[0].shape[ax + 1:],
               "concat", f"incompatible shapes {ts[0].shape} and {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _record("concat", tuple(ts), out, lambda g: tuple(np.split(g, bounds, axis=ax)))


def scatter_dense(values: Tensor, rows, cols, shape) -> Tensor:
    """Dense ``shape`` matrix holding ``values`` at unique ``(rows, cols)``."""
    values = as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    _check(values.shape == rows.shape == cols.shape, "scatter_dense", "index/value length mismatch")
    out = np.zeros(shape)
    out[rows, cols] = values.data
    return _record("scatter_dense", (values,), out, lambda g: (g[rows, cols],))


# ---------------------------------------------------------------- reductions


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the trailing axis."""
    x = as_tensor(x)
    nrm = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def bw(g):
        safe = np.where(nrm > 0, nrm, 1.0)
        return (g[..., None] * x.data / safe[..., None] * (nrm > 0)[..., None],)

    return _record("row_norm", (x,), nrm, bw)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    if axis is None:
        return _record("sum", (x,), np.sum(x.data), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    ax = axis % x.data.ndim
    out = np.sum(x.data, axis=ax)
    return _record("sum", (x,), out,
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return _record("mean", (x,), np.mean(x.data), lambda g: (np.full(x.shape, g / n),))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check(pred.shape == target.shape, "l1_loss", f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return _record("l1_loss", (pred, target), np.mean(np.abs(diff)), bw)
