"""Dense float64 tensors with reverse-mode autodiff.

Small by design: exactly the ops the networks in this package need, each
with a hand-written backward. Arrays are row-major numpy buffers; graphs
are built eagerly and freed when the loss goes out of scope. Not thread
safe while a graph is recording.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rule."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (target nets, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return np.asarray(arr, dtype=np.float64, order="C")


class Tensor:
    """A float64 array plus an optional gradient buffer and graph edge."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self._grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # -- basics ------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> Optional[np.ndarray]:
        if self.requires_grad and self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def _accum(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64)
        else:
            self._grad += g

    # -- backward ----------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; grads accumulate additively."""
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node._grad is not None:
                node._backward(node._grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def sum_squares(self):
        return tsum(mul(self, self))


def _wrap(other) -> Tensor:
    return other if isinstance(other, Tensor) else Tensor(other)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._grad = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise / broadcast ops --------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _wrap(a)
        data = a.data * float(b)

        def backward_scalar(g, _a=a, _c=float(b)):
            if _a.requires_grad:
                _a._accum(g * _c)

        return _make(data, (a,), backward_scalar)
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def relu(x) -> Tensor:
    x = _wrap(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accum(g * (x.data > 0.0))

    return _make(data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.requires_grad:
            x._accum(g * data * (1.0 - data))

    return _make(data, (x,), backward)


def tanh(x) -> Tensor:
    x = _wrap(x)
    data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g * (1.0 - data * data))

    return _make(data, (x,), backward)


# -- matmul ------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """a @ b where a is (..., m, k) and b is (k, n) or (..., k, n)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
            b._accum(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


# -- shape ops ----------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    data = np.asarray(data, order="C")

    def backward(g):
        if x.requires_grad:
            x._accum(g.reshape(x.shape))

    return _make(data, (x,), backward)


def permute(x, axes: tuple) -> Tensor:
    x = _wrap(x)
    data = np.asarray(np.transpose(x.data, axes), order="C")
    inv = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x._accum(np.transpose(g, inv))

    return _make(data, (x,), backward)


def transpose_last2(x) -> Tensor:
    x = _wrap(x)
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return permute(x, axes)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} on axis {axis}") from None
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _make(data, ts, backward)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _wrap(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    start, stop = max(0, start if start >= 0 else start + n), min(n, stop if stop >= 0 else stop + n)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    data = np.asarray(x.data[tuple(idx)], order="C")

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[tuple(idx)] = g
            x._accum(full)

    return _make(data, (x,), backward)


def gather_last(x, index: np.ndarray) -> Tensor:
    """Pick one entry along the last axis: out[...] = x[..., index[...]]."""
    x = _wrap(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} vs data {x.shape}")
    data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    data = np.asarray(data, order="C")

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
            x._accum(full)

    return _make(data, (x,), backward)


def mask_fill(x, keep: np.ndarray, value: float) -> Tensor:
    """Keep entries where `keep`; set the rest to `value` (no grad there)."""
    x = _wrap(x)
    keepb = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    data = np.where(keepb, x.data, value)

    def backward(g):
        if x.requires_grad:
            x._accum(np.where(keepb, g, 0.0))

    return _make(data, (x,), backward)


# -- reductions ----------------------------------------------------------------


def tsum(x, axis=None) -> Tensor:
    x = _wrap(x)
    data = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if x.requires_grad:
            if axis is None:
                x._accum(np.broadcast_to(g, x.shape).copy())
            else:
                x._accum(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(data, (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = _wrap(x)
    data = np.asarray(x.data.mean(axis=axis))
    if axis is None:
        count = x.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.shape[a] for a in axis]))
    else:
        count = x.shape[axis]

    def backward(g):
        if x.requires_grad:
            if axis is None:
                x._accum(np.broadcast_to(g / count, x.shape).copy())
            else:
                x._accum(np.broadcast_to(np.expand_dims(g, axis) / count, x.shape).copy())

    return _make(data, (x,), backward)


# -- fused network ops -----------------------------------------------------------


def softmax_rows(x, temperature: float = 1.0, key_mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-stochastic softmax over the last axis, with optional key masking.

    Masked keys get exactly zero weight; temperature must be positive and
    divides the logits before normalization.
    """
    x = _wrap(x)
    if temperature <= 0.0:
        raise ValueError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / temperature
    if key_mask is not None:
        maskb = np.broadcast_to(np.asarray(key_mask, dtype=bool), z.shape)
        z = np.where(maskb, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    # all-masked rows would give -inf max; keep them finite and uniform-free
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=-1, keepdims=True)
    data = e / denom

    def backward(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            x._accum((g - inner) * data / temperature)

    return _make(data, (x,), backward)


def layer_norm(x, gain, offset, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, offset = _wrap(x), _wrap(gain), _wrap(offset)
    if gain.shape != (x.shape[-1],) or offset.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain/offset {gain.shape}/{offset.shape} vs features {x.shape[-1:]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + offset.data

    def backward(g):
        n = x.shape[-1]
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
            gain._accum(gg)
        if offset.requires_grad:
            offset._accum(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            t1 = gx.sum(axis=-1, keepdims=True)
            t2 = (gx * xhat).sum(axis=-1, keepdims=True)
            x._accum(inv * (gx - t1 / n - xhat * t2 / n))

    return _make(data, (x, gain, offset), backward)


# -- op registry ------------------------------------------------------------------

OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax_rows": softmax_rows,
    "concat": concat,
    "slice_axis": slice_axis,
    "mean": mean,
    "sum": tsum,
    "reshape": reshape,
    "permute": permute,
    "gather_last": gather_last,
    "mask_fill": mask_fill,
    "layer_norm": layer_norm,
}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name; rejects unknown kinds."""
    if op_kind not in OPS:
        raise KeyError(f"unknown op kind {op_kind!r}; known: {sorted(OPS)}")
    return OPS[op_kind](*inputs, **kwargs)
