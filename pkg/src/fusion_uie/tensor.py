"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable op records its parents and a closure mapping the
output gradient to one gradient per parent.  ``backward`` walks the graph
in reverse topological order; intermediate gradients live in a scratch
dict for the duration of the call, only leaf tensors accumulate into
``.grad``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = ""

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self, parameters: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, parameters)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter(Tensor):
    """A trainable leaf tensor carrying its dotted ownership path."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from exc


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # written as "<= 0 -> 0" so NaN propagates instead of being zeroed
    return _make(np.where(a.data <= 0, 0.0, a.data), (a,), lambda g: (g * mask,), "relu")


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """max(0,x) + slope*min(0,x); ``slope`` broadcasts against ``a``."""
    pos = a.data > 0
    out = np.where(pos, a.data, slope.data * a.data)

    def bw(g):
        ga = g * np.where(pos, 1.0, slope.data)
        gs = _unbroadcast(g * np.where(pos, 0.0, a.data), slope.shape)
        return ga, gs

    return _make(out, (a, slope), bw, "prelu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp_min(a: Tensor, lo: float = 0.0) -> Tensor:
    mask = a.data > lo
    return _make(np.where(a.data <= lo, lo, a.data), (a,), lambda g: (g * mask,), "clamp_min")


# -- reductions / shape ----------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, bw, "concat")


# -- network primitives ----------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: (c, h, w, k, k) -> (c*k*k, h*w)
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    o, c, k, _ = w.shape
    _, h, wd = x.shape
    if k == 1:
        return (w.reshape(o, c) @ x.reshape(c, h * wd)).reshape(o, h, wd)
    return (w.reshape(o, c * k * k) @ _im2col(x, k)).reshape(o, h, wd)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects input (C,H,W) and weight (O,C,k,k); got {x.shape}, {weight.shape}")
    o, c, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {kh}")
    if x.shape[0] != c:
        raise ShapeError(f"conv2d input has {x.shape[0]} channels, weight expects {c}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({o},)")
    k = kh
    _, h, wd = x.shape
    cols = None if k == 1 else _im2col(x.data, k)
    if k == 1:
        out = (weight.data.reshape(o, c) @ x.data.reshape(c, h * wd)).reshape(o, h, wd)
    else:
        out = (weight.data.reshape(o, c * k * k) @ cols).reshape(o, h, wd)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def bw(g):
        g2 = g.reshape(o, h * wd)
        gx = gw = None
        if x.requires_grad:
            # adjoint of same-padded correlation = correlation with flipped, transposed kernel
            gx = _conv_same(g, weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        if weight.requires_grad:
            src = x.data.reshape(c, h * wd) if k == 1 else cols
            gw = (g2 @ src.T).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 1 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = weight.data @ x.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = [weight.data.T @ g, np.outer(g, x.data)]
        if bias is not None:
            grads.append(g.copy())
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects (C,H,W), got {x.shape}")
    return mean(x, axis=(1, 2))


def spatial_pool_pair(x: Tensor) -> Tensor:
    """Stack per-pixel channel mean (plane 0) and channel max (plane 1)."""
    if x.ndim != 3:
        raise ShapeError(f"spatial_pool_pair expects (C,H,W), got {x.shape}")
    c = x.shape[0]
    avg = x.data.mean(axis=0)
    idx = x.data.argmax(axis=0)
    mx = np.take_along_axis(x.data, idx[None], axis=0)[0]

    def bw(g):
        gx = np.broadcast_to(g[0] / c, x.shape).copy()
        np.put_along_axis(gx, idx[None], np.take_along_axis(gx, idx[None], axis=0) + g[1][None], axis=0)
        return (gx,)

    return _make(np.stack([avg, mx]), (x,), bw, "spatial_pool_pair")


# -- graph traversal -------------------------------------------------------

def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor, parameters: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves in ``parameters`` that the graph does not reach receive a zero
    gradient (if they had none yet).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if parameters is not None:
        for p in parameters:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def depthwise_conv2d(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Apply one fixed odd (k,k) kernel to every channel, zero 'same' padding."""
    k = kernel.shape[0]
    if kernel.shape != (k, k) or k % 2 == 0:
        raise ShapeError(f"depthwise kernel must be square and odd, got {kernel.shape}")
    c, h, w = x.shape
    flat = kernel.reshape(-1)

    def run(a: np.ndarray, kf: np.ndarray) -> np.ndarray:
        cols = _im2col(a.reshape(c, h, w), k).reshape(c, k * k, h * w)
        return np.einsum("k,ckn->cn", kf, cols).reshape(c, h, w)

    out = run(x.data, flat)
    flipped = kernel[::-1, ::-1].reshape(-1)
    return _make(out, (x,), lambda g: (run(g, flipped),), "depthwise_conv2d")
