"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations are recorded on the thread's active :class:`Tape` whenever one of
their inputs requires a gradient. A tape is built fresh for every forward pass
and can be differentiated exactly once::

    with Tape() as tape:
        loss = (w * w).sum() * 0.5
    tape.backward(loss)      # w.grad == w.data
"""
import threading

import numpy as np

from . import kernels

__all__ = [
    "DimensionError",
    "NumericInputError",
    "TapeError",
    "Tensor",
    "Tape",
    "tensor",
    "backward",
    "matmul",
    "relu",
    "exp",
    "log_softmax",
    "softmax",
    "no_grad_softmax",
]


class DimensionError(ValueError):
    pass


class NumericInputError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to us

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self):
        return list(self.data.shape)

    @property
    def values(self):
        return self.data.ravel().tolist()

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False

    def record(self, out, inputs, backward_fn):
        if self.consumed:
            raise TapeError("cannot record on a tape that has already been differentiated")
        out.requires_grad = True
        out._tape = self
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss):
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
            raise DimensionError(f"backward() needs a scalar loss, got {shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        if self.consumed:
            raise TapeError("tape already differentiated; run a new forward pass")
        self.consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._tape is not self:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
        self.nodes = []


def backward(loss):
    """Populate ``.grad`` on every leaf that requires one."""
    if not isinstance(loss, Tensor):
        raise DimensionError("backward() needs a Tensor")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced on an active tape")
    tape.backward(loss)


def _record(out_data, inputs, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.data.shape, b.data.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record(ad * bd, (a, b), bw)


def matmul(a, b):
    """Matrix product of 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _record(ad @ bd, (a, b), bw)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0.0  # gradient at exactly 0 is 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def tsum(a, axis=None):
    a = _as_tensor(a)
    shape = a.data.shape
    if axis is None:
        return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(out, (a,), bw)


def mean(a, axis=None):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def log_softmax(logits):
    """Stable log-softmax over the last axis of a 1-D or 2-D tensor."""
    logits = _as_tensor(logits)
    x = logits.data
    if x.ndim not in (1, 2) or x.shape[-1] < 2:
        raise DimensionError(f"log_softmax needs [C] or [B, C] with C >= 2, got {logits.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericInputError("log_softmax received non-finite logits")
    rows = x.reshape(1, -1) if x.ndim == 1 else x
    out = kernels.log_softmax_rows(rows)

    def bw(g):
        return (kernels.log_softmax_backward_rows(g.reshape(out.shape), out).reshape(x.shape),)

    return _record(out.reshape(x.shape), (logits,), bw)


def softmax(logits):
    return exp(log_softmax(logits))


def no_grad_softmax(logits):
    """Softmax of a plain array, off the tape."""
    x = np.asarray(logits, dtype=np.float64)
    rows = x.reshape(1, -1) if x.ndim == 1 else x
    return np.exp(kernels.log_softmax_rows(rows)).reshape(x.shape)
