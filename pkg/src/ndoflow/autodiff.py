"""Dense-tensor numerics with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays (float32 is an opt-in per-model flag).
Operations executed while a Tape is active are recorded in execution order,
which is already a topological order of the computation graph, so the
backward pass is a single reverse sweep. A fresh tape is built every
training step; adaptive solvers therefore may record a different number of
nodes each iteration without any bookkeeping.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class AutodiffError(RuntimeError):
    pass


class NonFiniteError(AutodiffError):
    """An op produced NaN/Inf. Raised immediately so bad values never reach
    an optimizer step."""


_ACTIVE_TAPE: Optional["Tape"] = None
_GRAD_ENABLED: bool = True


class Tape:
    """Execution-ordered record of tensors produced by primitive ops.

    ``nodes`` is a creation-ordered list; reversing it visits every node in
    reverse topological order exactly once. Adjoint buffers live on the
    tensors themselves (``Tensor.grad``).
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, t: "Tensor") -> None:
        self.nodes.append(t)

    def clear(self) -> None:
        for n in self.nodes:
            n.grad = None
            n._backward = None
            n._parents = ()
        self.nodes.clear()

    def release(self) -> None:
        """Drop graph structure but keep computed grads readable.

        Recorded tensors reference this tape and the tape references them,
        so an abandoned graph is a reference cycle of numpy buffers that
        only the cycle collector would reclaim; training loops build one
        graph per iteration and cannot wait that long."""
        for n in self.nodes:
            n._backward = None
            n._parents = ()
            n._tape = None
        self.nodes.clear()

    def backward(self, loss: "Tensor") -> None:
        """Seed the adjoint of ``loss`` and sweep the tape once, in reverse.

        ``loss`` must be a scalar recorded on this tape. Leaf parameters
        touched by the graph end up with ``grad`` buffers; untouched leaves
        keep ``grad is None`` (read back as exact zeros via ``grad_of``).
        """
        if loss.data.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise AutodiffError("loss was not recorded on this tape (detached graph)")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


@contextlib.contextmanager
def tape():
    """Activate a fresh Tape for the duration of the block and yield it.

    The graph is released on exit (parameter and intermediate grads stay
    readable); backward must run inside the block."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    t = Tape()
    _ACTIVE_TAPE = t
    try:
        yield t
    finally:
        _ACTIVE_TAPE = prev
        t.release()


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops inside run as plain numpy with no closures."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output of op '{op}'")


class Tensor:
    """Immutable-by-convention value node. ``data`` is never mutated by ops;
    optimizers write fresh arrays into parameter tensors between tapes."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()
        self._tape: Optional[Tape] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self._tape is None:
            raise AutodiffError("tensor is not attached to a tape")
        self._tape.backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def parameter(data, dtype=None) -> Tensor:
    """Leaf tensor with requires_grad set; keeps the source float dtype."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def grad_of(param: Tensor) -> np.ndarray:
    """Adjoint of a leaf after backward; exact zeros if the loss never saw it."""
    if param.grad is None:
        return np.zeros_like(param.data)
    return param.grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Closures never mutate arrays they hand out, so aliasing on first
    # assignment is safe; later accumulations allocate fresh arrays.
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make_op(op: str, data: np.ndarray, parents: Sequence[Tensor],
             backward: Optional[Callable[[np.ndarray], None]]) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    # every op under an active tape is recorded, so a loss that happens to
    # touch no parameter still backpropagates (to all-zero leaf grads)
    if _GRAD_ENABLED and _ACTIVE_TAPE is not None:
        out.requires_grad = True
        out._backward = backward
        out._parents = tuple(parents)
        out._tape = _ACTIVE_TAPE
        _ACTIVE_TAPE.record(out)
    return out


# primitive ops ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))
    return _make_op("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))
    return _make_op("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))
    return _make_op("mul", a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _make_op("div", a.data / b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)
    return _make_op("neg", -a.data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise AutodiffError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    return _make_op("matmul", a.data @ b.data, (a, b), bwd)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))
    return _make_op("pow", a.data ** p, (a,), bwd)


def square(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g * 2.0 * a.data)
    return _make_op("square", a.data * a.data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / out_data)
    return _make_op("sqrt", out_data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)
    return _make_op("exp", out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g / a.data)
    return _make_op("log", np.log(a.data), (a,), bwd)


def sin(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g * np.cos(a.data))
    return _make_op("sin", np.sin(a.data), (a,), bwd)


def cos(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g * np.sin(a.data))
    return _make_op("cos", np.cos(a.data), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out_data * out_data))
    return _make_op("tanh", out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable both directions
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        _accum(a, g * out_data * (1.0 - out_data))
    return _make_op("sigmoid", out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)
    return _make_op("relu", np.where(mask, a.data, 0.0), (a,), bwd)


def elu(a: Tensor) -> Tensor:
    """ELU with alpha = 1: x for x > 0, exp(x) - 1 otherwise."""
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0.0))
    out_data = np.where(x > 0, x, neg_part)

    def bwd(g):
        _accum(a, g * np.where(x > 0, 1.0, neg_part + 1.0))
    return _make_op("elu", out_data, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bwd(g):
        _accum(a, g * sign)
    return _make_op("abs", np.abs(a.data), (a,), bwd)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    mask = a.data >= b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * mask, a.data.shape))
        _accum(b, _unbroadcast(g * ~mask, b.data.shape))
    return _make_op("maximum", np.maximum(a.data, b.data), (a, b), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data > lo) & (a.data < hi)

    def bwd(g):
        _accum(a, g * mask)
    return _make_op("clip", np.clip(a.data, lo, hi), (a,), bwd)


def tsum(a: Tensor, axis=None) -> Tensor:
    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())
    return _make_op("sum", a.data.sum(axis=axis), (a,), bwd)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.data.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.data.shape).copy())
    return _make_op("mean", a.data.mean(axis=axis), (a,), bwd)


def tmax(a: Tensor) -> Tensor:
    """Max over all elements; ties send the full adjoint to the first hit."""
    flat_idx = int(np.argmax(a.data))

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf.flat[flat_idx] = g if np.ndim(g) == 0 else g.item()
        _accum(a, buf)
    return _make_op("max", a.data.max(), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])
    return _make_op("concat", np.concatenate([t.data for t in tensors], axis=axis),
                    tensors, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]

    def bwd(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))
    return _make_op("stack", np.stack([t.data for t in tensors], axis=axis),
                    tensors, bwd)


def take(a: Tensor, idx) -> Tensor:
    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(a, buf)
    return _make_op("slice", a.data[idx], (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(old))
    return _make_op("reshape", a.data.reshape(shape), (a,), bwd)


def custom_op(name: str, data: np.ndarray, parents: Sequence[Tensor],
              backward: Callable[[np.ndarray], None]) -> Tensor:
    """Register a fused primitive (forward already computed) on the tape.

    ``backward`` receives the output adjoint and must accumulate into the
    parents via ``accumulate_grad``. Used by the recurrent-network kernels
    where recording every gate op individually would dominate runtime.
    """
    return _make_op(name, data, parents, backward)


accumulate_grad = _accum


def collect_grads(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [grad_of(p) for p in params]
