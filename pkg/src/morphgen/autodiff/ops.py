"""Differentiable operations.

Each op computes its forward value with numpy (or the conv kernels) and, when
a tape is active and an input requires a gradient, records a closure that maps
the output gradient to input gradients.
"""
import numpy as np

from ..errors import ShapeError
from ..kernels import col2im, conv_output_extent, im2col
from .tensor import Node, Tape, Tensor, as_tensor, check_finite

INSTANCE_NORM_EPS = 1e-5


def _emit(kind, data, inputs, backward):
    out = Tensor(data)
    tape = Tape.current()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out._recorded = True
        tape.record(Node(kind, inputs, out, backward))
    return out


def _wants(t):
    return isinstance(t, Tensor) and t.requires_grad


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    like = a if isinstance(a, Tensor) else b
    return as_tensor(a, like), as_tensor(b, like)


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if _wants(a) else None,
            _unbroadcast(g, b.shape) if _wants(b) else None,
        )

    return _emit("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if _wants(a) else None,
            -_unbroadcast(g, b.shape) if _wants(b) else None,
        )

    return _emit("add", a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if _wants(a) else None,
            _unbroadcast(g * a.data, b.shape) if _wants(b) else None,
        )

    return _emit("mul", a.data * b.data, (a, b), backward)


def relu(x):
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def silu(x):
    sig = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * sig

    def backward(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _emit("silu", y, (x,), backward)


def tanh(x):
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def hinge_relu(x):
    """Elementwise ``max(0, 1 - x)``."""
    m = 1.0 - x.data
    mask = m > 0
    return _emit("hinge_relu", np.where(mask, m, 0).astype(x.dtype), (x,), lambda g: (-(g * mask),))


# ---------------------------------------------------------------- reductions and losses


def mean(x):
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),)

    return _emit("mean", np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype), (x,), backward)


def sum(x):  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (np.full(x.shape, g.reshape(()), dtype=x.dtype),)

    return _emit("mean", np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype), (x,), backward)


def mse(a, b):
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape {a.shape} != {b.shape}")
    d = a.data - b.data
    n = d.size

    def backward(g):
        ga = (2.0 / n) * g.reshape(()) * d
        return (ga if _wants(a) else None, -ga if _wants(b) else None)

    return _emit("mse", np.asarray(np.mean(d * d, dtype=np.float64), dtype=a.dtype), (a, b), backward)


def l1(a, b):
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"l1: shape {a.shape} != {b.shape}")
    d = a.data - b.data
    n = d.size

    def backward(g):
        ga = (g.reshape(()) / n) * np.sign(d)
        return (ga if _wants(a) else None, -ga if _wants(b) else None)

    return _emit("l1", np.asarray(np.mean(np.abs(d), dtype=np.float64), dtype=a.dtype), (a, b), backward)


# ---------------------------------------------------------------- shape manipulation


def reshape(x, shape):
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, index):
    def backward(g):
        gx = np.zeros_like(x.data)
        if _is_basic(index):
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _emit("getitem", np.ascontiguousarray(x.data[index]), (x,), backward)


def concat(tensors, axis=1):
    tensors = tuple(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(p if _wants(t) else None for p, t in zip(np.split(g, bounds, axis=axis), tensors))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_rows(table, idx):
    """Gather rows of a 2D ``table``; gradients scatter-add back onto the rows."""
    idx = np.asarray(idx)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("take_rows", table.data[idx], (table,), backward)


def straight_through(z, values):
    """Forward ``values``; backward copies the gradient onto ``z`` unchanged."""
    values = np.asarray(values, dtype=z.dtype)
    if values.shape != z.shape:
        raise ShapeError(f"straight_through: values {values.shape} vs latent {z.shape}")
    return _emit("straight_through", values.copy(), (z,), lambda g: (g,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = _pair(a, b)
    check_finite(a.data, b.data, where="matmul")
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape} do not match")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if _wants(a) else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if _wants(b) else None
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), backward)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), backward)


def scaled_dot_attention(q, k, v):
    """Single-head ``softmax(q k^T / sqrt(c)) v`` over the last two axes (..., L, c)."""
    check_finite(q.data, k.data, v.data, where="scaled_dot_attention")
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are incompatible")
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k.data
        gk = np.swapaxes(gs, -1, -2) @ q.data
        return gq, gk, gv

    return _emit("scaled_dot_attention", out.astype(q.dtype, copy=False), (q, k, v), backward)


def instance_norm(x, weight=None, bias=None, eps=INSTANCE_NORM_EPS):
    """Normalise each (sample, channel) over its spatial extent, then apply an optional affine map."""
    if x.ndim < 3:
        raise ShapeError(f"instance_norm expects (N, C, *spatial), got {x.shape}")
    check_finite(x.data, where="instance_norm")
    axes = tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat if weight is None else xhat * weight.data.reshape(bshape)
    if bias is not None:
        y = y + bias.data.reshape(bshape)
    inputs = (x,) + tuple(t for t in (weight, bias) if t is not None)

    def backward(g):
        gxhat = g if weight is None else g * weight.data.reshape(bshape)
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True) - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        grads = [gx if _wants(x) else None]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0,) + axes) if _wants(weight) else None)
        if bias is not None:
            grads.append(g.sum(axis=(0,) + axes) if _wants(bias) else None)
        return tuple(grads)

    return _emit("instance_norm", y.astype(x.dtype, copy=False), inputs, backward)


# ---------------------------------------------------------------- convolutions


def _conv_checks(kind, x, w, stride, padding):
    if x.ndim != 5:
        raise ShapeError(f"{kind}: input must be 5-D (N, C, D, H, W), got {x.ndim}-D shape {x.shape}")
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ShapeError(f"{kind}: kernel must be 5-D with a cubic window, got {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"{kind}: need stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    check_finite(x.data, w.data, where=kind)


def conv3d(x, w, b=None, stride=1, padding=0):
    """3D cross-correlation; ``w`` is (out_channels, in_channels, k, k, k)."""
    _conv_checks("conv3d", x, w, stride, padding)
    N, C = x.shape[:2]
    O, Cw, k = w.shape[:3]
    if Cw != C:
        raise ShapeError(f"conv3d: input has {C} channels (dim 1) but kernel expects {Cw} (kernel dim 1)")
    out_ext = tuple(conv_output_extent(n, k, stride, padding) for n in x.shape[2:])
    if min(out_ext) < 1:
        raise ShapeError(f"conv3d: spatial extent {x.shape[2:]} too small for kernel {k} with padding {padding}")
    cols = im2col(x.data, k, stride, padding, out_ext)
    wm = w.data.reshape(O, -1)
    y = wm @ cols
    if b is not None:
        y += b.data[:, None]
    out = np.ascontiguousarray(y.reshape((O, N) + out_ext).transpose(1, 0, 2, 3, 4))
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = g.transpose(1, 0, 2, 3, 4).reshape(O, -1)
        gx = col2im(wm.T @ gm, x.shape, k, stride, padding, out_ext) if _wants(x) else None
        gw = (gm @ cols.T).reshape(w.shape) if _wants(w) else None
        grads = (gx, gw)
        if b is not None:
            grads += (gm.sum(axis=1) if _wants(b) else None,)
        return grads

    return _emit("conv3d", out, inputs, backward)


def conv_transpose3d(x, w, b=None, stride=1, padding=0, output_padding=0):
    """Adjoint of :func:`conv3d`; ``w`` is (in_channels, out_channels, k, k, k)."""
    _conv_checks("conv_transpose3d", x, w, stride, padding)
    N, C = x.shape[:2]
    Cw, O, k = w.shape[:3]
    if Cw != C:
        raise ShapeError(f"conv_transpose3d: input has {C} channels (dim 1) but kernel expects {Cw} (kernel dim 0)")
    if not 0 <= output_padding < stride:
        raise ShapeError(f"conv_transpose3d: output_padding {output_padding} must be in [0, stride)")
    in_ext = x.shape[2:]
    out_ext = tuple((n - 1) * stride - 2 * padding + k + output_padding for n in in_ext)
    if min(out_ext) < 1:
        raise ShapeError(f"conv_transpose3d: output extent {out_ext} is empty")
    xm = x.data.transpose(1, 0, 2, 3, 4).reshape(C, -1)
    wm = w.data.reshape(C, -1)
    out = col2im(wm.T @ xm, (N, O) + out_ext, k, stride, padding, in_ext)
    if b is not None:
        out += b.data.reshape(1, O, 1, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gcols = im2col(g, k, stride, padding, in_ext)
        gx = None
        if _wants(x):
            gx = np.ascontiguousarray((wm @ gcols).reshape((C, N) + in_ext).transpose(1, 0, 2, 3, 4))
        gw = (xm @ gcols.T).reshape(w.shape) if _wants(w) else None
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3, 4)) if _wants(b) else None,)
        return grads

    return _emit("conv_transpose3d", out, inputs, backward)


# ---------------------------------------------------------------- dispatcher

OP_KINDS = {
    "conv3d": conv3d,
    "conv_transpose3d": conv_transpose3d,
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "silu": silu,
    "instance_norm": instance_norm,
    "softmax": softmax,
    "scaled_dot_attention": scaled_dot_attention,
    "mse": mse,
    "l1": l1,
    "hinge_relu": hinge_relu,
    "mean": mean,
}


def forward_op(kind, inputs, **attrs):
    """Run op ``kind`` on ``inputs`` (a sequence of Tensors) with op-specific ``attrs``."""
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(OP_KINDS)}") from None
    inputs = [as_tensor(t) for t in inputs]
    check_finite(*(t.data for t in inputs), where=kind)
    return fn(*inputs, **attrs)
