"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive computes its forward value eagerly and, when gradients are
enabled and some input requires them, records a closure that maps the
output gradient to input gradients.  ``backward`` walks the recorded graph
once in reverse topological order, summing contributions of shared
subexpressions in that fixed order so results are bit-reproducible.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "backward",
    "topological_order",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "expand",
    "getitem",
    "embedding",
    "sum",
    "mean",
    "max",
    "exp",
    "log",
    "tanh",
    "gelu",
    "softmax",
    "softmax_rows",
    "log_softmax",
    "layer_norm",
    "l2_normalize",
    "cross_entropy",
]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class ContractError(ValueError):
    """Raised when a precondition of an operation does not hold."""


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, frozen parts)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array that can take part in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
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


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaves listed in ``inputs`` that are not connected to ``loss`` receive an
    all-zero gradient.  Gradients accumulate into existing ``.grad`` buffers.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        order = topological_order(loss)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
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
    if inputs is not None:
        for leaf in inputs:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {sa} and {sb}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"cannot subtract shapes {sa} and {sb}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {sa} and {sb}") from exc
    ad, bd = a.data, b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    half_1pt = 0.5 * (1.0 + t)
    y = xd * half_1pt

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (half_1pt + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(y, (x,), grad_fn)


# ------------------------------------------------------------------- algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # batched activations times a shared weight: one flat GEMM each way
        k, n = sb
        out = (ad.reshape(-1, k) @ bd).reshape(sa[:-1] + (n,))

        def grad_fn(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(sa) if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), grad_fn)

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)
        return ga, gb

    return _make(ad @ bd, (a, b), grad_fn)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(data, (x,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tuple(tensors), grad_fn)


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape``; gradient sums over the broadcast axes."""
    src = x.shape
    try:
        data = np.broadcast_to(x.data, tuple(shape)).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot expand {src} to {tuple(shape)}") from exc
    return _make(data, (x,), lambda g: (_unbroadcast(g, src),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape
    basic = _is_basic_index(idx)

    def grad_fn(g):
        out = np.zeros(src)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), grad_fn)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range for vocabulary of size {vocab}")

    def grad_fn(g):
        out = np.zeros(weight.shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (out,)

    return _make(weight.data[ids], (weight,), grad_fn)


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max(x: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximiser."""
    arg = np.argmax(x.data, axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)
    src = x.shape

    def grad_fn(g):
        out = np.zeros(src)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _make(np.squeeze(y, axis=axis), (x,), grad_fn)


# ------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax.  ``mask`` (bool, broadcastable) marks allowed entries;
    disallowed entries get probability exactly zero."""
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), grad_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix."""
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def grad_fn(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(y, (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then apply the affine pair."""
    d = x.shape[-1]
    if d < 2:
        raise ContractError("layer_norm needs a last axis of at least 2")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} for width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    y = xhat * gd + beta.data

    def grad_fn(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return _make(y, (x, gamma, beta), grad_fn)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ContractError("cannot L2-normalise a zero-norm vector")
    y = xd / norm

    def grad_fn(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), grad_fn)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean negative log-likelihood over the last (class) axis.

    ``targets`` has the shape of ``logits`` without its last axis; ``weights``
    (same shape, default all ones) selects which positions count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != targets.shape:
        raise ShapeError(f"weights {w.shape} do not match targets {targets.shape}")
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy has no counted positions")
    xd = logits.data
    shifted = xd - np.max(xd, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = np.sum(w * nll) / total

    def grad_fn(g):
        p = np.exp(shifted - lse[..., None])
        np.put_along_axis(
            p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1
        )
        return (p * (w / total)[..., None] * g,)

    return _make(np.asarray(loss), (logits,), grad_fn)
