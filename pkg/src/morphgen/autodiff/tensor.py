"""Tensor, Parameter and the define-by-run Tape."""
import contextlib
import threading

import numpy as np

from ..errors import NonFiniteError, ShapeError, TapeError

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def shadow_f64():
    """Create new tensors and parameters in float64 (gradient checking only)."""
    prev = default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_recorded", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else default_dtype())
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._recorded = False

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)
    size = property(lambda self: self.data.size)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        """Same values, no gradient path (the stop-gradient barrier)."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        return _ops().add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _ops().mul(self, -1.0)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes)

    def mean(self):
        return _ops().mean(self)

    def sum(self):
        return _ops().sum(self)


def _ops():
    from . import ops

    return ops


class AdamState:
    __slots__ = ("m", "v", "step")

    def __init__(self, shape, dtype):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.step = 0


class Parameter(Tensor):
    """A trainable tensor with a name and its own Adam moment buffers."""

    __slots__ = ("name", "adam")

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.adam = AdamState(self.data.shape, self.data.dtype)

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.adam.m = self.adam.m.astype(dtype)
        self.adam.v = self.adam.v.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)
        return self


class Node:
    __slots__ = ("kind", "inputs", "out", "backward")

    def __init__(self, kind, inputs, out, backward):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Operations are recorded only while a tape is active (``with Tape() as t``)
    and at least one input requires a gradient; outside a tape every op runs
    in inference mode.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    @staticmethod
    def current():
        stack = getattr(_state, "tapes", None)
        return stack[-1] if stack else None

    def __enter__(self):
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def record(self, node):
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        self.nodes.append(node)

    def backward(self, loss, params=None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        ``params`` listed but unreachable from ``loss`` receive a zero gradient.
        """
        if self.consumed:
            raise TapeError("backward already run on this tape")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = getattr(loss, "shape", None)
            raise ShapeError(f"backward needs a scalar loss, got shape {shape}")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp._recorded:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        self.nodes = []
        if params is not None:
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)


def backward(loss, params=None):
    """Run backward on the tape that recorded ``loss``."""
    tape = Tape.current()
    if tape is None:
        raise TapeError("no active tape; wrap the forward pass in `with Tape():`")
    tape.backward(loss, params)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def check_finite(*arrays, where=""):
    for a in arrays:
        s = a.sum()
        if not np.isfinite(s) and not np.isfinite(a).all():
            raise NonFiniteError(f"non-finite input to {where}")
