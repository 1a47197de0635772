"""Layer containers built on the autodiff ops."""
import numpy as np

from . import ops
from .tensor import Parameter, default_dtype


class Module:
    """Minimal parameter container; submodules and Parameters are discovered from attributes."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def astype(self, dtype):
        for p in self.parameters():
            p.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.data.shape:
                    raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
                p.data = arr.astype(p.data.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Conv3d(Module):
    def __init__(self, in_ch, out_ch, k=3, stride=1, padding=None, rng=None, bias=True):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        bound = 1.0 / np.sqrt(in_ch * k**3)
        self.weight = Parameter(_uniform(rng, bound, (out_ch, in_ch, k, k, k)))
        self.bias = Parameter(_uniform(rng, bound, (out_ch,))) if bias else None

    def forward(self, x):
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, in_ch, out_ch, k=4, stride=2, padding=1, output_padding=0, rng=None):
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        bound = 1.0 / np.sqrt(out_ch * k**3 / stride**3)
        self.weight = Parameter(_uniform(rng, bound, (in_ch, out_ch, k, k, k)))
        self.bias = Parameter(_uniform(rng, bound, (out_ch,)))

    def forward(self, x):
        return ops.conv_transpose3d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class Linear(Module):
    def __init__(self, in_f, out_f, rng=None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_f)
        self.weight = Parameter(_uniform(rng, bound, (in_f, out_f)))
        self.bias = Parameter(_uniform(rng, bound, (out_f,)))

    def forward(self, x):
        return ops.add(ops.matmul(x, self.weight), self.bias)


class InstanceNorm3d(Module):
    def __init__(self, channels, affine=True):
        dt = default_dtype()
        self.weight = Parameter(np.ones(channels, dtype=dt)) if affine else None
        self.bias = Parameter(np.zeros(channels, dtype=dt)) if affine else None

    def forward(self, x):
        return ops.instance_norm(x, self.weight, self.bias)


class SpatialAttention(Module):
    """Single-head self-attention over all flattened spatial positions."""

    def __init__(self, channels, rng=None):
        self.norm = InstanceNorm3d(channels)
        self.qkv = Conv3d(channels, 3 * channels, k=1, rng=rng)
        self.proj = Conv3d(channels, channels, k=1, rng=rng)

    def _sequences(self, x):
        N, C = x.shape[:2]
        L = int(np.prod(x.shape[2:]))
        return x.reshape(N, C, L).transpose(0, 2, 1)

    def _restore(self, y, shape):
        N, C = shape[:2]
        return y.transpose(0, 2, 1).reshape(shape)

    def forward(self, x):
        C = x.shape[1]
        qkv = self.qkv(self.norm(x))
        q, k, v = (self._sequences(qkv[:, i * C : (i + 1) * C]) for i in range(3))
        y = self._restore(ops.scaled_dot_attention(q, k, v), x.shape)
        return x + self.proj(y)


class DepthAttention(SpatialAttention):
    """Single-head self-attention along the depth axis, independently per (h, w) column."""

    def _sequences(self, x):
        N, C, D, H, W = x.shape
        return x.transpose(0, 3, 4, 2, 1).reshape(N * H * W, D, C)

    def _restore(self, y, shape):
        N, C, D, H, W = shape
        return y.reshape(N, H, W, D, C).transpose(0, 4, 3, 1, 2)


def silu(x):
    return ops.silu(x)
