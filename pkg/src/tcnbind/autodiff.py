"""Dense float32 tensors with reverse-mode automatic differentiation.

Keeps just enough machinery to express a causal convolutional classifier
and differentiate it with respect to parameters and inputs. Tensors are
immutable after construction except for gradient accumulation; the graph
linking them is freed as soon as ``backward`` has replayed it.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

Array = np.ndarray

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass
class Node:
    """One recorded operation: kind, inputs, and its vector-Jacobian rule."""

    op: str
    parents: tuple["Tensor", ...]
    backward_fn: Callable[[Array], tuple[Optional[Array], ...]]


class Tensor:
    """Dense n-dimensional array of float32 values, optionally differentiable.

    ``data`` is row-major float32. ``grad`` mirrors ``data``'s shape once
    ``backward`` has run. ``node`` links into the (acyclic) graph of
    recorded operations and is cleared after backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "exact")

    def __init__(self, values, shape: Sequence[int] | None = None,
                 requires_grad: bool = False):
        data = np.asarray(values, dtype=np.float32)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s <= 0 for s in shape):
                raise ValueError(f"extents must be positive, got {shape}")
            expected = int(np.prod(shape))
            if data.size != expected:
                raise ValueError(
                    f"shape {shape} expects {expected} values, got {data.size}")
            data = data.reshape(shape)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self.node: Optional[Node] = None
        # scalar reductions stash their float64 accumulator here; values
        # stay float32, but precision-sensitive readers (the finite
        # difference checker) can avoid the final rounding
        self.exact: Optional[float] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            _non_scalar(self)
        if self.exact is not None:
            return self.exact
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module functions do the work.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def backward(self) -> None:
        backward(self)


def _non_scalar(t: Tensor):
    raise ValueError(f"expected a one-element tensor, got shape {t.shape}")


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: Array, op: str, parents: tuple[Tensor, ...],
            backward_fn: Callable[[Array], tuple[Optional[Array], ...]]) -> Tensor:
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out.node = Node(op, parents, backward_fn)
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward_fn(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(data, "add", (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward_fn(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(data, "sub", (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward_fn(g: Array):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _record(data, "mul", (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward_fn(g: Array):
        return g @ b.data.T, a.data.T @ g

    return _record(data, "matmul", (a, b), backward_fn)


# ---------------------------------------------------------------------------
# activations

def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, np.float32(0))

    def backward_fn(g: Array):
        return ((x.data > 0).astype(np.float32) * g,)

    return _record(data, "relu", (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    data = _sigmoid_stable(x.data)

    def backward_fn(g: Array):
        return (data * (1.0 - data) * g,)

    return _record(data, "sigmoid", (x,), backward_fn)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def backward_fn(g: Array):
        return ((1.0 - data * data) * g,)

    return _record(data, "tanh", (x,), backward_fn)


def _sigmoid_stable(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# reductions (float64 accumulators, float32 results)

def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normalized = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
        normalized.append(axis % ndim)
    if len(set(normalized)) != len(normalized):
        raise ValueError(f"duplicate axes in {axes}")
    return tuple(sorted(normalized))


def _restore_shape(g: Array, in_shape: tuple[int, ...], axes: tuple[int, ...]) -> Array:
    kept = list(in_shape)
    for axis in axes:
        kept[axis] = 1
    return np.broadcast_to(g.reshape(kept), in_shape)


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    acc = x.data.sum(axis=axes, dtype=np.float64)

    def backward_fn(g: Array):
        return (np.ascontiguousarray(_restore_shape(g, x.shape, axes)),)

    out = _record(acc.astype(np.float32), "sum", (x,), backward_fn)
    if out.size == 1:
        out.exact = float(acc.reshape(-1)[0]) if acc.ndim else float(acc)
    return out


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    acc = x.data.mean(axis=axes, dtype=np.float64)

    def backward_fn(g: Array):
        return (np.ascontiguousarray(_restore_shape(g, x.shape, axes)) / count,)

    out = _record(acc.astype(np.float32), "mean", (x,), backward_fn)
    if out.size == 1:
        out.exact = float(acc.reshape(-1)[0]) if acc.ndim else float(acc)
    return out


def reduce_max(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    # Collapse the reduced axes to one trailing axis so argmax can pick the
    # lowest-index maximum deterministically.
    order = [a for a in range(x.ndim) if a not in axes] + list(axes)
    moved = np.transpose(x.data, order)
    kept_shape = moved.shape[: x.ndim - len(axes)]
    flat = moved.reshape(kept_shape + (-1,))
    winners = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, winners[..., None], axis=-1)[..., 0]

    def backward_fn(g: Array):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, winners[..., None], g.reshape(kept_shape + (1,)), axis=-1)
        inverse = np.argsort(order)
        return (np.ascontiguousarray(
            np.transpose(gflat.reshape(moved.shape), inverse)),)

    return _record(data, "max", (x,), backward_fn)


# ---------------------------------------------------------------------------
# shape ops

def pad_leading(x: Tensor, amount: int, value: float = 0.0) -> Tensor:
    """Prepend ``amount`` constant positions along the time axis (axis -2)."""
    if amount < 0:
        raise ValueError(f"pad amount must be non-negative, got {amount}")
    if x.ndim < 2:
        raise ValueError("pad_leading expects a [..., L, C] tensor")
    if amount == 0:
        pads = None
    else:
        pads = [(0, 0)] * x.ndim
        pads[-2] = (amount, 0)
    data = x.data if pads is None else np.pad(
        x.data, pads, constant_values=np.float32(value))

    def backward_fn(g: Array):
        return (g[..., amount:, :],)

    return _record(data, "pad_leading", (x,), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward_fn(g: Array):
        return (g.reshape(x.shape),)

    return _record(data, "reshape", (x,), backward_fn)


def getitem(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing with a scatter backward."""
    data = x.data[key]

    def backward_fn(g: Array):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _record(np.ascontiguousarray(data), "getitem", (x,), backward_fn)


def make_op(data: Array, op: str, parents: Iterable[Tensor],
            backward_fn: Callable[[Array], tuple[Optional[Array], ...]]) -> Tensor:
    """Register a custom primitive (used by convolution and loss kernels)."""
    return _record(np.asarray(data, dtype=np.float32), op, tuple(parents), backward_fn)


# ---------------------------------------------------------------------------
# backward pass

def backward(out: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``out``.

    ``out`` must hold exactly one element; its own gradient seeds to 1. The
    recorded graph is replayed once in reverse topological order and freed.
    """
    if out.data.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {out.shape}")

    tape: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            tape.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    out.grad = np.ones_like(out.data)
    for tensor in reversed(tape):
        node = tensor.node
        if node is None:
            continue
        tensor.node = None  # graph freed; no higher-order gradients
        if tensor.grad is None:
            continue
        grads = node.backward_fn(tensor.grad)
        for parent, grad in zip(node.parents, grads):
            if grad is None or not parent.requires_grad:
                continue
            grad = np.asarray(grad, dtype=np.float32)
            if parent.grad is None:
                parent.grad = grad.copy() if grad.base is not None else grad
            else:
                parent.grad = parent.grad + grad


# ---------------------------------------------------------------------------
# gradient checking

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            eps: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic and scalar-valued. The relative-error
    denominator is floored at 1e-8 so exact zeros compare cleanly.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ValueError(f"f must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = probe.grad.reshape(-1).astype(np.float64)

    numeric = np.empty_like(analytic)
    base = x.data.copy()
    with no_grad():
        for i in range(base.size):
            bumped = base.copy()
            bumped.reshape(-1)[i] = base.reshape(-1)[i] + eps
            hi = f(Tensor(bumped)).item()
            bumped.reshape(-1)[i] = base.reshape(-1)[i] - eps
            lo = f(Tensor(bumped)).item()
            numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
