"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Var` wraps an ndarray together with the parents that produced it
and one vector-Jacobian closure per parent.  Calling :func:`backward` on a
scalar loss walks the tape in reverse topological order and accumulates
gradients into every reachable node.  All arithmetic broadcasts like numpy;
the backward pass undoes broadcasting by summing over the expanded axes.

Only the primitives this package needs are implemented.  Everything runs
in float64; there is no device or dtype dispatch.
"""

from __future__ import annotations

from typing import Any, Callable, Sequence

import numpy as np

from .errors import NumericalError

Array = np.ndarray

# Log standard deviations are clamped to this range before exponentiation
# so a single bad gradient step cannot produce inf/0 scales.
LOG_SCALE_MIN = -8.0
LOG_SCALE_MAX = 8.0


class Var:
    """Node in the computation tape: a value plus backward closures."""

    __slots__ = ("value", "grad", "parents", "vjps", "name")

    def __init__(
        self,
        value: Any,
        parents: tuple["Var", ...] = (),
        vjps: tuple[Callable[[Array], Array], ...] = (),
        name: str = "",
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Array | None = None
        self.parents = parents
        self.vjps = vjps
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        tag = self.name or "var"
        return f"Var({tag}, shape={self.value.shape})"

    # Operator sugar; every method delegates to the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_var(x: Any, name: str = "") -> Var:
    """Lift a constant to a leafless Var; pass Vars through unchanged."""
    if isinstance(x, Var):
        return x
    return Var(x, name=name)


def leaf(value: Any, name: str) -> Var:
    """Named leaf whose gradient survives :func:`backward`."""
    return Var(value, name=name)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(value, parents, vjps, name):
    return Var(value, parents=tuple(parents), vjps=tuple(vjps), name=name)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(g, b.value.shape)),
        "add",
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(-g, b.value.shape)),
        "sub",
    )


def neg(a) -> Var:
    a = as_var(a)
    return _node(-a.value, (a,), (lambda g: -g,), "neg")


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
        "mul",
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(
        a.value / b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.value, a.value.shape),
            lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
        "div",
    )


def power(a, p: float) -> Var:
    """Elementwise a**p for a constant exponent."""
    a = as_var(a)
    return _node(
        a.value**p,
        (a,),
        (lambda g: g * p * a.value ** (p - 1),),
        "power",
    )


def square(a) -> Var:
    a = as_var(a)
    return _node(a.value * a.value, (a,), (lambda g: g * 2.0 * a.value,), "square")


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return _node(out, (a,), (lambda g: g * out,), "exp")


def log(a) -> Var:
    a = as_var(a)
    return _node(np.log(a.value), (a,), (lambda g: g / a.value,), "log")


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.value)
    return _node(out, (a,), (lambda g: g * (1.0 - out * out),), "tanh")


def sin(a) -> Var:
    a = as_var(a)
    return _node(np.sin(a.value), (a,), (lambda g: g * np.cos(a.value),), "sin")


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), (lambda g: g * mask,), "relu")


def sigmoid(a) -> Var:
    a = as_var(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return _node(out, (a,), (lambda g: g * out * (1.0 - out),), "sigmoid")


def clip(a, lo: float, hi: float) -> Var:
    """Clamp values to [lo, hi]; gradient is zero outside the interval."""
    a = as_var(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), (lambda g: g * mask,), "clip")


def clip_log_scale(a) -> Var:
    """Standard clamp applied to every log-scale head before exp."""
    return clip(a, LOG_SCALE_MIN, LOG_SCALE_MAX)


def sum_(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Array) -> Array:
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape).copy()

    return _node(out, (a,), (vjp,), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    if axis is None:
        n = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.value.shape[i] for i in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def dot(x, w) -> Var:
    """x @ w for a stack of row vectors x (..., fin) and a matrix w (fin, fout)."""
    x, w = as_var(x), as_var(w)
    return _node(
        x.value @ w.value,
        (x, w),
        (
            lambda g: g @ w.value.T,
            lambda g: np.einsum("...i,...j->ij", x.value, g, optimize=True),
        ),
        "dot",
    )


def matmul(a, b) -> Var:
    """Batched matrix product; both operands must have ndim >= 2."""
    a, b = as_var(a), as_var(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires ndim >= 2 on both operands; use dot for vectors")
    return _node(
        a.value @ b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape),
            lambda g: _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape),
        ),
        "matmul",
    )


def concat(parts: Sequence[Any], axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.value for p in parts], axis=axis)

    def make_vjp(i: int):
        def vjp(g: Array) -> Array:
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(index)]

        return vjp

    return _node(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))), "concat")


def reshape(a, shape) -> Var:
    a = as_var(a)
    return _node(a.value.reshape(shape), (a,), (lambda g: g.reshape(a.value.shape),), "reshape")


def getitem(a, idx) -> Var:
    """Basic (non-fancy) indexing with scatter-add backward."""
    a = as_var(a)

    def vjp(g: Array) -> Array:
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return _node(a.value[idx], (a,), (vjp,), "getitem")


def stack(parts: Sequence[Any], axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    out = np.stack([p.value for p in parts], axis=axis)

    def make_vjp(i: int):
        return lambda g: np.take(g, i, axis=axis)

    return _node(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))), "stack")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Var:
    """Numerically stable log-sum-exp; the max shift is treated as constant."""
    a = as_var(a)
    shift = np.max(a.value, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    shifted = sub(a, shift)
    out = add(log(sum_(exp(shifted), axis=axis, keepdims=True)), shift)
    if not keepdims:
        out = reshape(out, np.squeeze(out.value, axis=axis).shape)
    return out


def log_softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Var:
    return exp(log_softmax(a, axis=axis))


def topo_order(root: Var) -> list[Var]:
    """Iterative depth-first topological sort of the tape below root."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, check_finite: bool = True) -> None:
    """Accumulate gradients of a scalar root into every reachable node."""
    if root.value.size != 1:
        raise ValueError("backward expects a scalar root")
    if check_finite and not np.isfinite(root.value).all():
        raise NumericalError(f"loss node '{root.name or 'output'}' is not finite")
    order = topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        if check_finite and not np.isfinite(node.grad).all():
            raise NumericalError(f"gradient at node '{node.name or 'unnamed'}' is not finite")
        for parent, vjp in zip(node.parents, node.vjps):
            contribution = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + contribution


def grad(root: Var, leaves: dict[str, Var], check_finite: bool = True) -> dict[str, Array]:
    """Backward pass returning one gradient array per named leaf."""
    backward(root, check_finite=check_finite)
    out = {}
    for name, v in leaves.items():
        out[name] = v.grad if v.grad is not None else np.zeros_like(v.value)
    return out
