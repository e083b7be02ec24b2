"""Minimal dense tensor with tape-based reverse-mode autodiff.

Values are float64 numpy arrays. Every op builds a node holding its parents and
a closure mapping the upstream gradient to one gradient per parent. Calling
``backward`` on a scalar walks the graph once in reverse topological order,
accumulates gradients additively across fan-out, and frees the graph.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64
LOG_EPS = 1e-12

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Optional[BackwardFn] = None,
        name: str = "",
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this tensor; defaults to d(self)/d(self) = 1."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            if len(parent_grads) != len(node._parents):
                raise RuntimeError("backward produced wrong number of gradients")
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"gradient shape {pg.shape} does not match parent {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)


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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def custom_grad(
    forward: Tensor,
    grad_override: BackwardFn,
    inputs: Optional[Sequence[Tensor]] = None,
) -> Tensor:
    """Keep ``forward``'s value but replace its backward rule.

    ``grad_override`` receives the upstream gradient and returns one gradient
    per entry of ``inputs`` (default: the parents of ``forward`` that require
    gradients). This is the hook the straight-through estimator is built on.
    """
    if inputs is None:
        inputs = tuple(p for p in forward._parents if p.requires_grad)
    return _make(forward.data, inputs, lambda g: tuple(grad_override(g)))


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        ),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _make(np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return _make(out, (x,), lambda g: (g * (sig + out * (1.0 - sig)),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


# reductions and shape ops


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(norm > 0, norm, 1.0)
        return (g * np.where(norm > 0, x.data / safe, 0.0),)

    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return _make(out, (x,), backward)


# linear algebra


def matmul(a: Tensor, b_transposed: Tensor) -> Tensor:
    """``a[..., D] @ b[M, D]^T -> [..., M]``, the layout of ``Y = X W^T``."""
    if b_transposed.ndim != 2 or a.shape[-1] != b_transposed.shape[1]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b_transposed.shape}^T"
        )
    w = b_transposed.data
    out = a.data @ w.T

    def backward(g):
        ga = g @ w
        flat_g = g.reshape(-1, g.shape[-1])
        flat_a = a.data.reshape(-1, a.shape[-1])
        return ga, flat_g.T @ flat_a

    return _make(out, (a, b_transposed), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a[..., T, K] @ b[..., K, S]``."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm shapes disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(
        out,
        (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
    )


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), backward)


# normalisation and probabilities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / rms(x) * weight`` over the last axis."""
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv

    def backward(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0)
        gx_hat = g * weight.data
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _make(xhat * weight.data, (x, weight), backward)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate pairs (first half, second half) of the last axis by fixed angles."""
    half = x.shape[-1] // 2

    def rotate(v, s):
        v1, v2 = v[..., :half], v[..., half:]
        return np.concatenate([v1 * cos - v2 * s, v2 * cos + v1 * s], axis=-1)

    return _make(rotate(x.data, sin), (x,), lambda g: (rotate(g, -sin),))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of ``-log(softmax(logits)[target] + 1e-12)`` over all positions."""
    targets = np.asarray(targets)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    if flat.shape[0] != t.shape[0]:
        raise DimensionError("targets do not match logits positions")
    shifted = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(t.shape[0])
    pt = p[rows, t]
    loss = -np.log(pt + LOG_EPS).mean()

    def backward(g):
        coef = (pt / (pt + LOG_EPS))[:, None]
        grad = p * coef
        grad[rows, t] -= coef[:, 0]
        return ((g / t.shape[0]) * grad.reshape(logits.shape),)

    return _make(np.asarray(loss), (logits,), backward)
