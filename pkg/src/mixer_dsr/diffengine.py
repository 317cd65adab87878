"""Tape-free reverse-mode differentiation over dense float64 arrays.

Every :class:`Value` remembers the operation that produced it and its inputs,
so the computation graph *is* the tape.  Arrays are limited to rank <= 2, which
is all the vector fields in this package need: a batch of states is an
``(N, d)`` matrix and every per-row context is an ``(N, d_ctx)`` matrix.

Values built from constants (``requires_grad=False``) do not record their
inputs, so large parts of a graph that only feed constants are never
revisited during the backward pass.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Value",
    "ShapeError",
    "apply",
    "backward",
    "grad",
    "no_grad",
    "frozen",
    "is_grad_enabled",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "matmul",
    "affine",
    "sum",
    "mean",
    "square",
    "swish",
    "relu",
    "tanh",
    "sin",
    "cos",
    "concat",
    "slice",
    "scale",
    "lincomb",
    "lowrank_dense",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording provenance (forward-only fast path)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


@contextmanager
def frozen(values: Iterable["Value"]):
    """Temporarily treat ``values`` as constants, so no gradient work is spent on them."""
    values = list(values)
    previous = [v.requires_grad for v in values]
    for v in values:
        v.requires_grad = False
    try:
        yield
    finally:
        for v, r in zip(values, previous):
            v.requires_grad = r


class ShapeError(ValueError):
    """Raised when the operands of a primitive have incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Value:
    __slots__ = ("data", "grad", "requires_grad", "op", "_prev", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(op, arr.shape)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._prev: tuple[Value, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._prev

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Value(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; every operator routes through a primitive.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return slice(self, index)


def constant(data) -> Value:
    return Value(data, requires_grad=False)


def parameter(data) -> Value:
    return Value(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: np.ndarray, op: str, parents: tuple, backward_fn) -> Value:
    """Wrap an op result, recording provenance only when a gradient can flow."""
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out.requires_grad = track
    out.op = op
    if track:
        out._prev = parents
        out._backward = backward_fn
    else:
        out._prev = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op: str, a: Value, b: Value) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _broadcast_check("add", a, b)
    out_data = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, "add", (a, b), _bw)


def sub(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _broadcast_check("sub", a, b)
    out_data = a.data - b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, "sub", (a, b), _bw)


def mul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _broadcast_check("mul", a, b)
    out_data = a.data * b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, "mul", (a, b), _bw)


def _matmul_check(op: str, a: Value, b: Value) -> None:
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(op, a.shape, b.shape)
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(op, a.shape, b.shape)


def _matmul_grads(g, a_data, b_data):
    if a_data.ndim == 2 and b_data.ndim == 2:
        return g @ b_data.T, a_data.T @ g
    if a_data.ndim == 1 and b_data.ndim == 2:
        return b_data @ g, np.outer(a_data, g)
    if a_data.ndim == 2 and b_data.ndim == 1:
        return np.outer(g, b_data), a_data.T @ g
    return g * b_data, g * a_data


def matmul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _matmul_check("matmul", a, b)
    out_data = a.data @ b.data

    def _bw(g):
        ga, gb = _matmul_grads(g, a.data, b.data)
        if a.requires_grad:
            a._accumulate(ga)
        if b.requires_grad:
            b._accumulate(gb)

    return _make(out_data, "matmul", (a, b), _bw)


def affine(x, w, b) -> Value:
    """``x @ w + b`` as a single node."""
    x, w, b = _as_value(x), _as_value(w), _as_value(b)
    _matmul_check("affine", x, w)
    lin = x.data @ w.data
    try:
        np.broadcast_shapes(lin.shape, b.shape)
    except ValueError:
        raise ShapeError("affine", lin.shape, b.shape) from None
    out_data = lin + b.data

    def _bw(g):
        gx, gw = _matmul_grads(g, x.data, w.data)
        if x.requires_grad:
            x._accumulate(gx)
        if w.requires_grad:
            w._accumulate(gw)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, "affine", (x, w, b), _bw)


def sum(x, axis: int | None = None) -> Value:  # noqa: A001 - mirrors numpy
    x = _as_value(x)
    out_data = np.asarray(x.data.sum(axis=axis))

    def _bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(out_data, "sum", (x,), _bw)


def mean(x, axis: int | None = None) -> Value:
    x = _as_value(x)
    n = x.data.size if axis is None else x.shape[axis]
    out_data = np.asarray(x.data.mean(axis=axis))

    def _bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g / n, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g / n, axis), x.shape))

    return _make(out_data, "mean", (x,), _bw)


def square(x) -> Value:
    x = _as_value(x)
    out_data = x.data * x.data

    def _bw(g):
        x._accumulate(2.0 * g * x.data)

    return _make(out_data, "square", (x,), _bw)


def swish(x) -> Value:
    x = _as_value(x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))  # overflow-free sigmoid
    out_data = x.data * sig

    def _bw(g):
        x._accumulate(g * (sig + out_data * (1.0 - sig)))

    return _make(out_data, "swish", (x,), _bw)


def relu(x) -> Value:
    x = _as_value(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def _bw(g):
        x._accumulate(g * mask)

    return _make(out_data, "relu", (x,), _bw)


def tanh(x) -> Value:
    x = _as_value(x)
    out_data = np.tanh(x.data)

    def _bw(g):
        x._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, "tanh", (x,), _bw)


def sin(x) -> Value:
    x = _as_value(x)
    out_data = np.sin(x.data)

    def _bw(g):
        x._accumulate(g * np.cos(x.data))

    return _make(out_data, "sin", (x,), _bw)


def cos(x) -> Value:
    x = _as_value(x)
    out_data = np.cos(x.data)

    def _bw(g):
        x._accumulate(-g * np.sin(x.data))

    return _make(out_data, "cos", (x,), _bw)


def concat(values: Sequence, axis: int = -1) -> Value:
    vals = [_as_value(v) for v in values]
    if not vals:
        raise ShapeError("concat", ())
    ndim = vals[0].ndim
    if ndim == 0 or any(v.ndim != ndim for v in vals):
        raise ShapeError("concat", *(v.shape for v in vals))
    ax = axis % ndim
    for v in vals[1:]:
        if v.shape[:ax] + v.shape[ax + 1:] != vals[0].shape[:ax] + vals[0].shape[ax + 1:]:
            raise ShapeError("concat", vals[0].shape, v.shape)
    out_data = np.concatenate([v.data for v in vals], axis=ax)
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def _bw(g):
        for v, lo, hi in zip(vals, bounds[:-1], bounds[1:]):
            if v.requires_grad:
                idx = [np.s_[:]] * ndim
                idx[ax] = np.s_[lo:hi]
                v._accumulate(g[tuple(idx)])

    return _make(out_data, "concat", tuple(vals), _bw)


def slice(x, index) -> Value:  # noqa: A001 - the primitive's name
    """Basic (non-fancy) indexing: ints and python slices only."""
    x = _as_value(x)
    idx = index if isinstance(index, tuple) else (index,)
    if not all(isinstance(i, (int, np.integer, type(np.s_[:]))) for i in idx):
        raise TypeError("slice only supports integers and python slices")
    try:
        out_data = x.data[index]
    except IndexError:
        raise ShapeError("slice", x.shape) from None

    def _bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        x._accumulate(full)

    return _make(np.array(out_data), "slice", (x,), _bw)


def scale(x, c: float) -> Value:
    x = _as_value(x)
    c = float(c)
    out_data = c * x.data

    def _bw(g):
        x._accumulate(c * g)

    return _make(out_data, "scale", (x,), _bw)


def lincomb(values: Sequence, coeffs: Sequence[float]) -> Value:
    """``sum_i coeffs[i] * values[i]`` over equally shaped Values, as one node."""
    vals = [_as_value(v) for v in values]
    if not vals or len(vals) != len(coeffs):
        raise ValueError("lincomb needs one coefficient per value")
    for v in vals[1:]:
        if v.shape != vals[0].shape:
            raise ShapeError("lincomb", vals[0].shape, v.shape)
    cs = [float(c) for c in coeffs]
    out_data = cs[0] * vals[0].data
    for c, v in zip(cs[1:], vals[1:]):
        out_data = out_data + c * v.data

    def _bw(g):
        for c, v in zip(cs, vals):
            if v.requires_grad:
                v._accumulate(c * g)

    return _make(out_data, "lincomb", tuple(vals), _bw)


def _act_forward(name: str, pre: np.ndarray) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Activation value and a map from output gradient to pre-activation gradient."""
    if name == "identity":
        return pre, lambda g: g
    if name == "swish":
        sig = 0.5 * (1.0 + np.tanh(0.5 * pre))
        out = pre * sig
        return out, lambda g: g * (sig + out * (1.0 - sig))
    if name == "tanh":
        out = np.tanh(pre)
        return out, lambda g: g * (1.0 - out * out)
    if name == "relu":
        mask = pre > 0
        return np.where(mask, pre, 0.0), lambda g: g * mask
    raise ValueError(f"unknown activation {name!r}")


def lowrank_dense(h, w, b, down, up, ctx, activation: str = "identity") -> Value:
    """``act(h @ w + b + ((h @ down) * ctx) @ up)`` as one node.

    ``down`` is ``(in, r)``, ``up`` is ``(r, out)`` and ``ctx`` broadcasts
    against ``(N, r)``: a single context row or one per batch row.
    """
    h, w, b, down, up, ctx = (_as_value(v) for v in (h, w, b, down, up, ctx))
    if h.ndim != 2:
        raise ShapeError("lowrank_dense", h.shape)
    try:
        u = h.data @ down.data
        v = u * ctx.data
        if v.shape != u.shape:
            raise ValueError
        pre = h.data @ w.data + b.data + v @ up.data
    except ValueError:
        raise ShapeError("lowrank_dense", h.shape, w.shape, b.shape, down.shape, up.shape, ctx.shape) from None
    out_data, act_grad = _act_forward(activation, pre)

    def _bw(g):
        gp = act_grad(g)
        if w.requires_grad:
            w._accumulate(h.data.T @ gp)
        if b.requires_grad:
            b._accumulate(_unbroadcast(gp, b.shape))
        if up.requires_grad:
            up._accumulate(v.T @ gp)
        gv = gp @ up.data.T
        if ctx.requires_grad:
            ctx._accumulate(_unbroadcast(gv * u, ctx.shape))
        gu = gv * ctx.data
        if down.requires_grad:
            down._accumulate(h.data.T @ gu)
        if h.requires_grad:
            h._accumulate(gp @ w.data.T + gu @ down.data.T)

    return _make(out_data, "lowrank_dense", (h, w, b, down, up, ctx), _bw)


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "affine": affine,
    "sum": sum,
    "mean": mean,
    "square": square,
    "swish": swish,
    "relu": relu,
    "tanh": tanh,
    "sin": sin,
    "cos": cos,
    "concat": concat,
    "slice": slice,
    "scale": scale,
    "lincomb": lincomb,
    "lowrank_dense": lowrank_dense,
}


def apply(op: str, *inputs, **kwargs) -> Value:
    """Dispatch a primitive by name, e.g. ``apply("mul", x, x)``."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}; expected one of {sorted(_PRIMITIVES)}") from None
    if op == "concat":
        return fn(list(inputs), **kwargs)
    if op == "lincomb":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Value) -> dict[Value, np.ndarray]:
    """Propagate d(root)/d(node) to every node upstream of ``root``.

    Returns a map from each reachable leaf to its gradient.  Leaf ``.grad``
    fields are accumulated into, so clear them between independent passes.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topological_order(root)
    for node in order:
        if node._prev:
            node.grad = None
    root._accumulate(np.ones_like(root.data))
    leaves: dict[Value, np.ndarray] = {}
    for node in reversed(order):
        if node._prev:
            if node.grad is not None:
                node._backward(node.grad)
            node.grad = None  # interior grads are not kept
        else:
            leaves[node] = node.grad if node.grad is not None else np.zeros_like(node.data)
    return leaves


def grad(root: Value, wrt: Iterable[Value]) -> list[np.ndarray]:
    """Gradients of ``root`` with respect to ``wrt``; unreachable leaves get zeros."""
    wrt = list(wrt)
    for w in wrt:
        w.grad = None
    leaf_grads = backward(root)
    return [np.array(leaf_grads[w]) if w in leaf_grads else np.zeros_like(w.data) for w in wrt]
