"""Dense arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every operation on tensors that
require gradients records its parents and a backward closure, so calling
:func:`backward` on a scalar result walks the recorded graph in reverse
topological order and fills ``.grad`` on every leaf.

Training runs in float32; gradient checks run in float64 (pass
``dtype=np.float64`` when building leaves).
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, GradientError, OracleError, ShapeError

logger = logging.getLogger(__name__)

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, frozen nets)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """n-dimensional real array participating in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    # ------------------------------------------------------------------
    # basic attributes

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{grad})"

    def __len__(self) -> int:
        return len(self.data)

    # ------------------------------------------------------------------
    # arithmetic

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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    # ------------------------------------------------------------------
    # reductions and reshaping

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ----------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _coerce_pair(a, b)
    pick_a = a.data >= b.data
    return _result(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _coerce_pair(a, b)
    pick_a = a.data <= b.data
    return _result(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "minimum",
    )


def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [n,k]@[k,m], got {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# ----------------------------------------------------------------------
# unary ops


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return _result(x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1.0),), "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever clamping was active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ----------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    original = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradients."""
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), grad_fn, "take")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# ----------------------------------------------------------------------
# row normalisation


def l2_normalize_rows(m: Tensor, tol: float = 1e-12) -> Tensor:
    """Scale every row of an ``[n, d]`` tensor to unit Euclidean norm.

    Rows whose norm is below ``tol`` pass through unchanged (and a warning is
    logged) so that a dead embedding does not crash training.
    """
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"l2_normalize_rows expects a non-empty [n, d] tensor, got {m.shape}")
    x = m.data
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    degenerate = norms < tol
    if degenerate.any():
        logger.warning("l2_normalize_rows: %d degenerate row(s) left unnormalised", int(degenerate.sum()))
    safe = np.where(degenerate, 1.0, norms).astype(x.dtype)
    out = x / safe

    def grad_fn(g):
        proj = np.sum(out * g, axis=1, keepdims=True)
        gx = (g - out * proj) / safe
        return (np.where(degenerate, g, gx),)

    return _result(out, (m,), grad_fn, "l2_normalize_rows")


# ----------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Differentiate a scalar ``loss`` with respect to every leaf in its graph.

    Leaf gradients are overwritten, not accumulated across calls. Returns a
    mapping from each reachable leaf that requires grad to its gradient.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward() expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is detached: no recorded operation depends on a tensor requiring grad")

    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            leaves[node] = g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def finite_diff_gradient(f: Callable[[Tensor], Tensor], x, h: float = 1e-3) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``.

    The oracle never touches the tape: ``f`` is evaluated under ``no_grad``
    on perturbed copies of ``x``.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64 if not isinstance(x, Tensor) else x.dtype)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(arr):
        with no_grad():
            value = f(Tensor(arr.copy()))
        v = value.item() if isinstance(value, Tensor) else float(value)
        if not np.isfinite(v):
            raise OracleError(f"function returned non-finite value {v}")
        return v

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate(base)
        flat[i] = orig - h
        down = evaluate(base)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
