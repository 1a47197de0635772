"""3D UNet noise predictor over stacked (cytoplasm, nucleus) latent grids."""
import numpy as np

from ..autodiff import Tensor, ops
from ..autodiff.nn import Conv3d, ConvTranspose3d, DepthAttention, InstanceNorm3d, Linear, Module, SpatialAttention
from ..errors import ShapeError


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer steps, shape (len(t), dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


class TimeResBlock(Module):
    def __init__(self, in_ch, out_ch, temb_dim, rng):
        self.norm1 = InstanceNorm3d(in_ch)
        self.conv1 = Conv3d(in_ch, out_ch, 3, rng=rng)
        self.temb = Linear(temb_dim, out_ch, rng=rng)
        self.norm2 = InstanceNorm3d(out_ch)
        self.conv2 = Conv3d(out_ch, out_ch, 3, rng=rng)
        self.skip = Conv3d(in_ch, out_ch, 1, rng=rng) if in_ch != out_ch else None

    def forward(self, x, temb):
        h = self.conv1(ops.silu(self.norm1(x)))
        t = self.temb(ops.silu(temb))
        h = h + t.reshape(t.shape + (1, 1, 1))
        h = self.conv2(ops.silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class DualUNet(Module):
    """Noise predictor with channel multipliers per level.

    Spatial extent halves between levels until it reaches 2; deeper levels keep
    that extent.  The bottleneck carries full spatial self-attention and the
    top decoder level a depth-wise attention layer.  The output convolution
    also sees the noisy input itself, so the near-identity map needed at
    large ``t`` does not have to squeeze through ``base`` normalised channels.
    """

    def __init__(self, in_channels, spatial, base=16, mults=(1, 2, 4, 8), cond_channels=0, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        self.in_channels, self.cond_channels, self.base, self.spatial = in_channels, cond_channels, base, spatial
        widths = [base * m for m in mults]
        temb_dim = 4 * base
        self.t_in = Linear(base, temb_dim, rng=rng)
        self.t_out = Linear(temb_dim, temb_dim, rng=rng)
        self.conv_in = Conv3d(in_channels + cond_channels, widths[0], 3, rng=rng)

        self.down_blocks, self.downsamples, self.resample = [], [], []
        ext, ch = spatial, widths[0]
        skips = []
        for i, w in enumerate(widths):
            self.down_blocks.append(TimeResBlock(ch, w, temb_dim, rng))
            ch = w
            skips.append(w)
            last = i == len(widths) - 1
            halve = not last and ext % 2 == 0 and ext // 2 >= 2
            self.resample.append(halve)
            self.downsamples.append(Conv3d(w, w, 3, stride=2, padding=1, rng=rng) if halve else None)
            if halve:
                ext //= 2
        self.mid1 = TimeResBlock(ch, ch, temb_dim, rng)
        self.mid_attn = SpatialAttention(ch, rng=rng)
        self.mid2 = TimeResBlock(ch, ch, temb_dim, rng)

        self.up_blocks, self.upsamples = [], []
        for i in reversed(range(len(widths))):
            w = widths[i]
            self.up_blocks.append(TimeResBlock(ch + skips[i], w, temb_dim, rng))
            ch = w
            if i > 0 and self.resample[i - 1]:
                self.upsamples.append(ConvTranspose3d(w, widths[i - 1], 3, 2, 1, output_padding=1, rng=rng))
                ch = widths[i - 1]
            else:
                self.upsamples.append(None)
        self.depth_attn = DepthAttention(ch, rng=rng)
        self.norm_out = InstanceNorm3d(ch)
        self.conv_out = Conv3d(ch + in_channels, in_channels, 3, rng=rng)

    def forward(self, x, t, cond=None):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if x.shape[1] != self.in_channels or x.shape[2:] != (self.spatial,) * 3:
            raise ShapeError(f"UNet expects (N, {self.in_channels}, {self.spatial}^3), got {x.shape}")
        noisy = x
        if self.cond_channels:
            if cond is None:
                raise ShapeError("this UNet is conditioned; pass the conditioning latents")
            cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=np.float32))
            x = ops.concat([x, cond], axis=1)
        N = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (N,))
        temb = Tensor(timestep_embedding(t, self.base).astype(x.dtype))
        temb = self.t_out(ops.silu(self.t_in(temb)))

        h = self.conv_in(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, temb)
            skips.append(h)
            if down is not None:
                h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)
        for block, up in zip(self.up_blocks, self.upsamples):
            h = block(ops.concat([h, skips.pop()], axis=1), temb)
            if up is not None:
                h = up(h)
        h = self.depth_attn(h)
        return self.conv_out(ops.concat([ops.silu(self.norm_out(h)), noisy], axis=1))
