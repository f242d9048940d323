"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation links its output to its inputs together with a local
backward rule, so a forward pass implicitly records the computation graph
in execution (topological) order. ``backward`` replays that graph once in
reverse, accumulating gradients into every participating tensor that has
``requires_grad`` set. A graph is consumed by its first backward pass and
must be rebuilt by a fresh forward pass; parameter (leaf) tensors survive
and can be reused across steps.

Only the operations this package needs are provided: matrix product,
broadcasting arithmetic, relu, row softmax, axis reductions, elementwise
square/sqrt/exp/log, and row/column gather-scatter. Everything is float64;
graphs are confined to a single thread, but independent graphs may run in
parallel threads since they share no mutable state.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConstraintError, GraphError, NumericError, ShapeError

Array = np.ndarray


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant view of this tensor, cut out of the graph (shares storage)."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _op(data: Array, parents: Sequence[Tensor], backward_rule) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_rule
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient back down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _op(a.data + b.data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _op(a.data - b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _op(a.data * b.data, (a, b), rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _op(a.data / b.data, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _op(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot matrix-multiply shapes {a.shape} and {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _op(a.data @ b.data, (a, b), rule)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def rule(g):
        return (g * mask,)

    return _op(np.maximum(x.data, 0.0), (x,), rule)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for overflow safety."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects a 2-d tensor, got shape {logits.shape}")
    if not np.isfinite(logits.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _op(s, (logits,), rule)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def rule(g):
        return (g * out_data,)

    return _op(out_data, (x,), rule)


def log(x: Tensor) -> Tensor:
    def rule(g):
        return (g / x.data,)

    return _op(np.log(x.data), (x,), rule)


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def rule(g):
        return (g * (0.5 / out_data),)

    return _op(out_data, (x,), rule)


def square(x: Tensor) -> Tensor:
    def rule(g):
        return (g * (2.0 * x.data),)

    return _op(x.data * x.data, (x,), rule)


def _expand_reduced(g: Array, shape: tuple[int, ...], axis: int | None, keepdims: bool) -> Array:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def rule(g):
        return (_expand_reduced(g, x.shape, axis, keepdims).copy(),)

    return _op(x.data.sum(axis=axis, keepdims=keepdims), (x,), rule)


def tmean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]

    def rule(g):
        return (_expand_reduced(g, x.shape, axis, keepdims) / count,)

    return _op(x.data.mean(axis=axis, keepdims=keepdims), (x,), rule)


def take_per_row(x: Tensor, indices) -> Tensor:
    """Pick one column per row: out[i] = x[i, indices[i]]."""
    idx = np.asarray(indices, dtype=np.intp)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"take_per_row needs one index per row of {x.shape}")
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= x.shape[1]:
        raise ConstraintError(f"column index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _op(x.data[rows, idx], (x,), rule)


def select_rows(x: Tensor, rows) -> Tensor:
    ridx = np.asarray(rows, dtype=np.intp)

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, ridx, g)
        return (gx,)

    return _op(x.data[ridx], (x,), rule)


def scatter_rows(x: Tensor, rows, num_rows: int) -> Tensor:
    """Embed the rows of x into a zero tensor with `num_rows` rows.

    Row indices must be unique.
    """
    ridx = np.asarray(rows, dtype=np.intp)
    data = np.zeros((num_rows,) + x.shape[1:], dtype=np.float64)
    data[ridx] = x.data

    def rule(g):
        return (g[ridx],)

    return _op(data, (x,), rule)


def take_col(x: Tensor, col: int, keepdims: bool = True) -> Tensor:
    if x.ndim != 2 or not (0 <= col < x.shape[1]):
        raise ShapeError(f"column {col} out of range for shape {x.shape}")
    sel = slice(col, col + 1) if keepdims else col

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[:, sel] = g
        return (gx,)

    return _op(x.data[:, sel], (x,), rule)


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from `loss`.

    The root must be scalar. Interior nodes are marked consumed so a second
    backward on the same graph raises; leaves stay reusable.
    """
    if loss.data.ndim != 0:
        raise GraphError(f"backward root must be a scalar, got shape {loss.shape}")

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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    if any(node._consumed for node in order):
        raise GraphError("graph already consumed by a previous backward; rerun the forward pass")

    if not loss.requires_grad:
        return
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
        node._consumed = True


def grad_check(f, point, step: float = 1e-5) -> float:
    """Compare the analytic gradient of a scalar graph against central differences.

    `f` maps one tensor to a scalar tensor. Returns the maximum relative
    error over coordinates, with denominator max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ConstraintError("finite-difference step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    x = Tensor(base.copy(), requires_grad=True)
    backward(f(x))
    analytic = np.zeros_like(base) if x.grad is None else x.grad

    numeric = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        bumped = base.copy()
        bumped[idx] += step
        hi = float(f(Tensor(bumped)).data)
        bumped[idx] -= 2 * step
        lo = float(f(Tensor(bumped)).data)
        numeric[idx] = (hi - lo) / (2 * step)

    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        raise NumericError("non-finite gradient encountered during grad_check")
    if base.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
