"""Reverse-mode differentiation over float64 numpy arrays.

Every op's vector-Jacobian product is itself written with differentiable ops,
so calling :func:`grad` with ``create_graph=True`` records the backward pass
and a second differentiation through it is exact. Force matching needs this:
the loss contains ``-dE/dx`` and is then differentiated w.r.t. parameters.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "tensor",
    "constant",
    "no_grad",
    "is_grad_enabled",
    "grad",
    "backward",
    "topological_order",
    "finite_diff_grad",
    "matmul",
    "add",
    "mul",
    "sub",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "sigmoid",
    "softplus",
    "shifted_softplus",
    "power",
    "where",
    "reshape",
    "swapaxes",
    "broadcast_to",
    "sum_to",
    "tsum",
    "mean",
    "concat",
    "take",
    "scatter_add",
    "softmax",
    "layer_norm",
    "detach",
]


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus the op record needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


# ---------------------------------------------------------------- broadcasting


def _sum_to_shape(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


def sum_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a

    def bw(g, needs):
        return (broadcast_to(g, a.shape),)

    return _make(_sum_to_shape(a.data, shape), (a,), bw, "sum_to")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a

    def bw(g, needs):
        return (sum_to(g, a.shape),)

    return _make(np.broadcast_to(a.data, shape), (a,), bw, "broadcast_to")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)

    def bw(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)

    def bw(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return _make(a.data - b.data, (a, b), bw, "sub")


def neg(a: Tensor) -> Tensor:
    def bw(g, needs):
        return (neg(g),)

    return _make(-a.data, (a,), bw, "neg")


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)

    def bw(g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = sum_to(div(g, b), a.shape)
        if needs[1]:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def bw(g, needs):
        if p == 2.0:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _make(a.data**p, (a,), bw, "power")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g, needs):
        return (mul(g, out),)

    out = _make(out_data, (a,), bw, "exp")
    return out


def log(a: Tensor) -> Tensor:
    def bw(g, needs):
        return (div(g, a),)

    return _make(np.log(a.data), (a,), bw, "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g, needs):
        return (div(mul(g, 0.5), out),)

    out = _make(out_data, (a,), bw, "sqrt")
    return out


def sin(a: Tensor) -> Tensor:
    def bw(g, needs):
        return (mul(g, cos(a)),)

    return _make(np.sin(a.data), (a,), bw, "sin")


def cos(a: Tensor) -> Tensor:
    def bw(g, needs):
        return (neg(mul(g, sin(a))),)

    return _make(np.cos(a.data), (a,), bw, "cos")


def _sigmoid_np(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_np(a.data)

    def bw(g, needs):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(out_data, (a,), bw, "sigmoid")
    return out


def softplus(a: Tensor) -> Tensor:
    def bw(g, needs):
        return (mul(g, sigmoid(a)),)

    return _make(np.logaddexp(0.0, a.data), (a,), bw, "softplus")


_LOG2 = float(np.log(2.0))


def shifted_softplus(a: Tensor) -> Tensor:
    """softplus(x) - log 2, zero at the origin."""
    return sub(softplus(a), _LOG2)


def where(cond, a, b) -> Tensor:
    """Select with a constant boolean mask; gradients flow to the chosen side only."""
    cond = np.asarray(cond, dtype=bool)
    a, b = constant(a), constant(b)
    cmask = Tensor(cond.astype(np.float64))
    nmask = Tensor((~cond).astype(np.float64))

    def bw(g, needs):
        return (
            sum_to(mul(g, cmask), a.shape) if needs[0] else None,
            sum_to(mul(g, nmask), b.shape) if needs[1] else None,
        )

    return _make(np.where(cond, a.data, b.data), (a, b), bw, "where")


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast like numpy."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = sum_to(matmul(g, swapaxes(b, -1, -2)), a.shape)
        if needs[1]:
            gb = sum_to(matmul(swapaxes(a, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g, needs):
        return (reshape(g, a.shape),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bw(g, needs):
        return (swapaxes(g, ax1, ax2),)

    return _make(np.swapaxes(a.data, ax1, ax2), (a,), bw, "swapaxes")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g, needs):
        if axis is None:
            gk = reshape(g, (1,) * a.ndim) if a.ndim else g
        elif keepdims:
            gk = g
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(sorted(ax % a.ndim for ax in axes))
            kshape = list(a.shape)
            for ax in axes:
                kshape[ax] = 1
            gk = reshape(g, kshape)
        return (broadcast_to(gk, a.shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g, needs):
        out = []
        for k, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(bounds[k]), int(bounds[k + 1]))
            out.append(take(g, tuple(idx)))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def take(a: Tensor, idx) -> Tensor:
    """Numpy indexing (basic or advanced); the adjoint accumulates repeats."""

    def bw(g, needs):
        return (scatter_add(g, idx, a.shape),)

    return _make(a.data[idx], (a,), bw, "take")


def scatter_add(g: Tensor, idx, shape) -> Tensor:
    shape = tuple(shape)
    buf = np.zeros(shape)
    np.add.at(buf, idx, g.data)

    def bw(gg, needs):
        return (take(gg, idx),)

    return _make(buf, (g,), bw, "scatter_add")


# ---------------------------------------------------------------- composites


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # the row max is a constant shift; softmax is invariant to it
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    ex = exp(sub(x, shift))
    return div(ex, tsum(ex, axis=axis, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if x.shape[-1] < 2:
        raise ShapeError(f"layer_norm needs width >= 2, got {x.shape}")
    mu = mean(x, axis=-1, keepdims=True)
    c = sub(x, mu)
    var = mean(mul(c, c), axis=-1, keepdims=True)
    return add(mul(div(c, sqrt(add(var, eps))), gain), bias)


# ---------------------------------------------------------------- backward


def topological_order(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output`` with every node after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
    allow_unused: bool = True,
) -> list[Tensor | None]:
    """Gradients of ``output`` w.r.t. ``inputs``.

    With ``create_graph`` the returned gradients are themselves differentiable.
    Only nodes on a path from some input to the output are visited.
    """
    if grad_output is None:
        if output.size != 1:
            raise ContractError(f"grad of a non-scalar output {output.shape} needs grad_output")
        grad_output = Tensor(np.ones_like(output.data))
    order = topological_order(output)
    targets = {id(t) for t in inputs}
    # mark nodes that lie on a path to one of the inputs
    reaches: dict[int, bool] = {}
    for node in order:
        r = id(node) in targets
        if not r:
            for p in node._parents:
                if reaches.get(id(p), False):
                    r = True
                    break
        reaches[id(node)] = r

    grads: dict[int, Tensor] = {id(output): grad_output}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.pop(id(node), None) if id(node) not in targets else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            needs = tuple(p.requires_grad and reaches.get(id(p), False) for p in node._parents)
            if not any(needs):
                continue
            pgrads = node._backward(g, needs)
            for p, pg, need in zip(node._parents, pgrads, needs):
                if not need or pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None and not allow_unused:
            raise ContractError(f"input {t.name or t!r} does not influence the output")
        out.append(g)
    return out


def backward(output: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if leaves is None:
        leaves = [n for n in topological_order(output) if n.is_leaf and n.requires_grad]
    leaves = list(leaves)
    for leaf, g in zip(leaves, grad(output, leaves)):
        if g is None:
            continue
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+h) - f(x-h)) / 2h, one component at a time."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(f(x))
        flat[k] = orig - step
        fm = float(f(x))
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * step)
    return out
