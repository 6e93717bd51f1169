"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything trained in this package (convolutions, the BiLSTM encoder, the
map/regression heads) runs on these tensors.  Arrays are numpy float64;
the graph bookkeeping and all derivative rules live here and are verified
against central finite differences by `grad_check`.

Broadcasting is deliberately narrow: a binary op accepts two operands only
when one shape is a trailing suffix of the other (e.g. [T,E] op [E]), and
the gradient of the smaller operand is the sum over the broadcast leading
axes.  Anything fancier is rejected.

Concurrency: graph construction and `backward` are single-writer.  A
tensor that no longer awaits a backward pass is immutable and may be read
from any number of threads.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _suffix_broadcast(sa: tuple, sb: tuple) -> tuple:
    """Output shape for leading-axis broadcasting, or raise ShapeError.

    One shape must equal the trailing suffix of the other.
    """
    if sa == sb:
        return sa
    big, small = (sa, sb) if len(sa) > len(sb) else (sb, sa)
    if len(small) == 0 or big[len(big) - len(small):] == small:
        return big
    raise ShapeError(f"shapes not broadcast-compatible over leading axes: {sa} vs {sb}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a gradient over the leading axes added by broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    g = grad.sum(axis=tuple(range(extra))) if extra > 0 else grad
    return g.reshape(shape)


class Tensor:
    """A dense float64 array node in a reverse-mode autodiff graph.

    `grad` is a same-shape accumulator, present iff `requires_grad`.
    Gradients accumulate additively across backward passes; call
    `zero_grad` between optimization steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        # Receives the upstream gradient, returns one gradient per parent
        # (None for parents that do not require grad).
        self._backward: Optional[Callable] = None

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = np.zeros_like(data) if out.requires_grad else None
        out._parents = tuple(parents)
        out._backward = backward if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        """A copy of the data outside the graph."""
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    def __add__(self, other):
        return add(self, Tensor._coerce(other))

    def __radd__(self, other):
        return add(Tensor._coerce(other), self)

    def __mul__(self, other):
        return mul(self, Tensor._coerce(other))

    def __rmul__(self, other):
        return mul(Tensor._coerce(other), self)

    def __sub__(self, other):
        return sub(self, Tensor._coerce(other))

    def __rsub__(self, other):
        return sub(Tensor._coerce(other), self)

    def __truediv__(self, other):
        return div(self, Tensor._coerce(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _binary(a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    """Generic broadcasting binary op.  `da(g)`/`db(g)` produce gradients in
    the output shape; unbroadcasting to operand shapes happens here."""
    _suffix_broadcast(a.shape, b.shape)
    out_data = fwd(a.data, b.data)
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        return (_unbroadcast(da(g), a.shape) if need_a else None,
                _unbroadcast(db(g), b.shape) if need_b else None)

    return Tensor._from_op(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.divide,
                   lambda g: g / b.data,
                   lambda g: -g * a.data / (b.data * b.data))


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor._from_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,),
                           lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return Tensor._from_op(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * sign,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only strictly inside."""
    inside = (x.data > lo) & (x.data < hi)
    return Tensor._from_op(np.clip(x.data, lo, hi), (x,),
                           lambda g: (g * inside,))


ELEMENTWISE_BINARY = {"add": add, "mul": mul}
ELEMENTWISE_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch an elementwise op by name (add, mul, sigmoid, tanh, relu)."""
    if op_kind in ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return ELEMENTWISE_BINARY[op_kind](a, b)
    if op_kind in ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} takes a single operand")
        return ELEMENTWISE_UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op: {op_kind!r}")


# ----------------------------------------------------------------------
# linear algebra / shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        return (g @ b.data.T if need_a else None,
                a.data.T @ g if need_b else None)

    return Tensor._from_op(out_data, (a, b), backward)


def tensor_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        out_data = np.asarray(x.data.sum())
        return Tensor._from_op(out_data, (x,),
                               lambda g: (np.full(x.shape, float(g)),))
    out_data = x.data.sum(axis=axis)
    return Tensor._from_op(
        out_data, (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return tensor_sum(x, axis) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return Tensor._from_op(x.data.reshape(shape), (x,),
                           lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {x.shape}")
    return Tensor._from_op(x.data.T.copy(), (x,), lambda g: (g.T,))


def flip0(x: Tensor) -> Tensor:
    """Reverse along the first axis (used by the backward LSTM direction)."""
    return Tensor._from_op(x.data[::-1].copy(), (x,), lambda g: (g[::-1],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return Tensor._from_op(out_data, tensors, backward)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice / integer) indexing with scatter-add backward."""
    out_data = x.data[idx]
    if not isinstance(out_data, np.ndarray):
        out_data = np.asarray(out_data)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] += g
        return (gx,)

    return Tensor._from_op(out_data, (x,), backward)


# ----------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into `t.grad` for every reachable leaf with
    `requires_grad`.  Repeated calls add up; use `zero_grad` to reset.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Iterative topological order; LSTM graphs get deep enough that
    # recursion would hit the interpreter limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._backward is not None:
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    # Per-call upstream map for interior nodes; leaves land in .grad so
    # successive backward passes accumulate additively.
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def deposit(node: Tensor, g: np.ndarray) -> None:
        if node._backward is None:
            node.grad += g
        else:
            acc = upstream.get(id(node))
            upstream[id(node)] = g if acc is None else acc + g

    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is not None and p.requires_grad:
                deposit(p, pg)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be scalar-valued; the relative error at each coordinate is
    |analytic - central| / max(1e-12, |analytic| + |central|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not x.requires_grad:
        raise ValueError("grad_check requires x.requires_grad")

    x.zero_grad()
    out = f(x)
    if out.size != 1:
        raise ShapeError("grad_check expects a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise ValueError("f(x) is not finite")
    backward(out)
    analytic = x.grad.copy().reshape(-1)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x).data.reshape(-1)[0])
        flat[i] = orig - eps
        f_minus = float(f(x).data.reshape(-1)[0])
        flat[i] = orig
        central = (f_plus - f_minus) / (2.0 * eps)
        err = abs(analytic[i] - central) / max(1e-12, abs(analytic[i]) + abs(central))
        worst = max(worst, err)
    return worst
