"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the lab needs are provided: elementwise arithmetic with
numpy broadcasting, ``matmul``, ``conv2d`` (cross-correlation, no kernel
flip), mean pooling, block upsampling, reductions and the two training
losses.  Every op records its parents and a closure computing the
vector-Jacobian product; :meth:`Tensor.backward` walks the recorded graph
once in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NonFiniteError, UsageError

_state = {"grad": True, "check_finite": True}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def set_check_finite(enabled: bool) -> bool:
    """Toggle NaN/Inf detection after every op. Returns the previous setting."""
    prev = _state["check_finite"]
    _state["check_finite"] = bool(enabled)
    return prev


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop.

    ``grad`` is ``None`` until a backward pass reaches the tensor, then an
    array of the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"empty extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], vjp, op: str) -> "Tensor":
        # a NaN or Inf anywhere makes the sum non-finite
        if _state["check_finite"] and not np.isfinite(np.sum(data)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- backward -------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every tracked tensor feeding into this scalar.

        Gradients are overwritten, not accumulated across calls.
        """
        if self.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise ----------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return Tensor._from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return Tensor._from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return Tensor._from_op(
        a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def square(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return Tensor._from_op(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


# -- shape and reductions ------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return Tensor._from_op(
        a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# -- spatial ops ---------------------------------------------------------------
def conv2d(x, kernels, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (the kernel is not flipped).

    ``x`` is ``[c_in, h, w]`` or batched ``[n, c_in, h, w]``; ``kernels`` is
    ``[c_out, c_in, k, k]``; optional ``bias`` is ``[c_out]``.  Output extent
    is ``floor((h + 2*pad - k) / stride) + 1``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d shapes {x.shape}, {kernels.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    n, c, h, w = x.shape
    o, ck, k, k2 = kernels.shape
    if ck != c or k != k2:
        raise DimensionError(f"kernel {kernels.shape} does not match input channels {c}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError(f"kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # im2col rows ordered (n, i, j), columns (c, u, v)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = kernels.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"bias shape {bias.shape} != ({o},)")
        out += bias.data
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gm.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    gxp[:, :, u:u + stride * (ho - 1) + 1:stride, v:v + stride * (wo - 1) + 1:stride] += (
                        dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2))
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return grads

    res = Tensor._from_op(out, parents, vjp, "conv2d")
    return reshape(res, res.shape[1:]) if unbatched else res


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k mean pooling over the last two axes."""
    *lead, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"pool size {k} does not divide {h}x{w}")
    out = x.data.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))

    def vjp(g):
        return (np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k),)

    return Tensor._from_op(out, (x,), vjp, "avg_pool2d")


def upsample_blocks(x: Tensor, bh: int, bw: int) -> Tensor:
    """Repeat every element of the last two axes into a ``bh x bw`` block."""
    out = np.repeat(np.repeat(x.data, bh, axis=-2), bw, axis=-1)

    def vjp(g):
        *lead, h, w = g.shape
        return (g.reshape(*lead, h // bh, bh, w // bw, bw).sum(axis=(-3, -1)),)

    return Tensor._from_op(out, (x,), vjp, "upsample")


# -- losses ----------------------------------------------------------------------
def softmax_crossentropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    logits = as_tensor(logits)
    z = logits.data if logits.ndim == 2 else logits.data.reshape(1, -1)
    t = np.atleast_1d(np.asarray(targets))
    if t.shape[0] != z.shape[0]:
        raise DimensionError(f"{t.shape[0]} targets for {z.shape[0]} rows of logits")
    if not np.issubdtype(t.dtype, np.integer) or t.min() < 0 or t.max() >= z.shape[1]:
        raise UsageError(f"class index out of range [0, {z.shape[1]})")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(lse - z[rows, t])

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return ((g / z.shape[0]) * p.reshape(logits.shape),)

    return Tensor._from_op(np.asarray(loss), (logits,), vjp, "softmax_xent")


def mse(a, b) -> Tensor:
    """Squared error summed over feature axes, averaged over the leading batch axis.

    A 1-D operand counts as a single sample, so ``mse(u, v) == ||u - v||^2``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse operands differ: {a.shape} vs {b.shape}")
    d = a - b
    sq = square(d)
    if a.ndim <= 1:
        return tsum(sq)
    return tsum(sq) * (1.0 / a.shape[0])
