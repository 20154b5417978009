"""Tape-free reverse-mode differentiation over numpy arrays.

Only the primitives needed by the actor-critic losses are provided: affine
maps, tanh, exp, log, square, reductions, element-wise min and clip.
Broadcasting follows numpy; gradients are summed back to operand shapes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import itertools

import numpy as np

_seq = itertools.count()


class NonFiniteLoss(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "seq")

    def __init__(self, value, parents: tuple["Tensor", ...] = (), backward: Callable | None = None, requires_grad: bool = False):
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = parents
        self._backward = backward
        if not requires_grad:
            for p in parents:
                if p.requires_grad:
                    requires_grad = True
                    break
        self.requires_grad = requires_grad
        self.seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def leaf(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value / b.value,
        (a, b),
        lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * a.value / (b.value * b.value), b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.value, (a,), lambda g: (-g,))


def matmul(x, W) -> Tensor:
    """``x @ W`` with matching leading (agent) axes, or 2-D operands."""
    x, W = as_tensor(x), as_tensor(W)

    def back(g):
        gx = np.matmul(g, np.swapaxes(W.value, -1, -2))
        gW = np.matmul(np.swapaxes(x.value, -1, -2), g)
        return _unbroadcast(gx, x.shape), _unbroadcast(gW, W.shape)

    return Tensor(np.matmul(x.value, W.value), (x, W), back)


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` where ``b`` has W's leading axes and one fewer dim than x."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    bias = b.value[..., None, :]

    def back(g):
        gx = np.matmul(g, np.swapaxes(W.value, -1, -2)) if x.requires_grad else None
        gW = np.matmul(np.swapaxes(x.value, -1, -2), g)
        # column sums as a matmul: much cheaper than a strided reduction
        gb = np.matmul(np.ones((1, g.shape[-2])), g)[..., 0, :]
        if gb.shape != b.shape:
            gb = _unbroadcast(gb, b.shape)
        if gW.shape != W.shape:
            gW = _unbroadcast(gW, W.shape)
        return gx, gW, gb

    return Tensor(np.matmul(x.value, W.value) + bias, (x, W, b), back)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)

    def back(g):
        d = np.multiply(out, out)
        np.subtract(1.0, d, out=d)
        d *= g
        return (d,)

    return Tensor(out, (a,), back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.value), (a,), lambda g: (g / a.value,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    s = sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def minimum(a, b) -> Tensor:
    """Element-wise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.value <= b.value
    return Tensor(
        np.where(take_a, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.shape), _unbroadcast(np.where(take_a, 0.0, g), b.shape)),
    )


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; identity gradient inside [lo, hi] (boundary included), zero outside."""
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return Tensor(np.clip(a.value, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def _toposort(root: Tensor) -> list[Tensor]:
    # a node is always created after its parents, so creation order is topological
    seen = {id(root): root}
    todo = [root]
    while todo:
        node = todo.pop()
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                todo.append(p)
    return sorted(seen.values(), key=lambda t: t.seq)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every differentiable node feeding ``loss``."""
    if loss.value.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not np.isfinite(loss.value).all():
        raise NonFiniteLoss("non-finite loss")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for p, g in zip(node.parents, grads):
            if not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    backward(loss)
    return [w.grad if w.grad is not None else np.zeros_like(w.value) for w in wrt]
