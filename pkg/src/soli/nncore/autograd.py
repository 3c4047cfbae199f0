"""A deliberately small reverse-mode differentiation engine on numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients.  ``backward`` walks the graph
once in reverse topological order, accumulates into leaf ``.grad`` buffers and
then releases the graph, so a second call without a new forward pass fails.

Ops keep the dtype of their inputs; the gradient checks rely on running the
same code on float64 copies of the parameters.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import GradientStateError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar, got shape {loss.data.shape}")
    if loss._consumed:
        raise GradientStateError("graph already consumed; run a new forward pass before backward()")
    if not loss.requires_grad:
        raise GradientStateError("no recorded forward pass leads to this tensor")
    if loss._backward is None:
        # a bare leaf: d(loss)/d(loss) = 1
        loss.grad = (loss.grad if loss.grad is not None else 0) + np.ones_like(loss.data)
        return

    order, seen = [], set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _const(x, like: np.ndarray):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def add(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _const(a, b.data)
    b = _const(b, a.data)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _const(a, b.data)
    b = _const(b, a.data)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _const(a, b.data)
    b = _const(b, a.data)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(x: Tensor) -> Tensor:
    return _make(np.square(x.data), (x,), lambda g: (2 * x.data * g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),))


def total(x: Tensor) -> Tensor:
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(x.data.sum() / n, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``a`` is ``(..., K)`` and ``b`` is a ``(K, N)`` matrix."""
    if b.data.ndim != 2 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        k, n = b.shape
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.intp)

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), back)


def stack(xs: list[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([x.data for x in xs], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _make(data, tuple(xs), back)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """Cross-correlation of ``x (B,C,H,W)`` with ``w (O,C,k,k)`` via im2col."""
    bsz, c, h, wd = x.shape
    o, c2, k, k2 = w.shape
    if c != c2 or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T + b.data).reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat).reshape(bsz, ho, wo, c, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad:pad + h, pad:pad + wd]
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, w, b), back)


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pool ``(B, C, H, W) -> (B, C)``."""
    n = x.shape[2] * x.shape[3]
    return _make(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / n, x.shape).copy(),))


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row of ``x (N, E)``; the subgradient at 0 is 0."""
    d = np.sqrt(np.square(x.data).sum(axis=1))

    def back(g):
        safe = np.where(d > 0, d, 1)
        return ((g / safe * (d > 0))[:, None] * x.data,)

    return _make(d, (x,), back)
