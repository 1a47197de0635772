"""Channel-wise VQ autoencoder with a joint decoder and a patch discriminator.

Each input channel is encoded separately by one shared encoder and quantised
against its own codebook; the decoder sees all quantised channels stacked on
the feature axis and reconstructs every channel at once.
"""
import csv
import logging
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import Adam, Tape, Tensor, load_optimizer, load_weights, ops, save_optimizer, save_weights
from .autodiff.nn import Conv3d, ConvTranspose3d, InstanceNorm3d, Module
from .errors import CheckpointError, NumericAbort, ShapeError
from .volume import CellVolume, is_preprocessed
from .vq import Codebook, quantize, vq_losses

log = logging.getLogger(__name__)

DOWNSAMPLE = 4
LOG_HEADER = ["step", "l_rec", "l_comm", "l_disc", "l_gen"]


@dataclass
class VqganConfig:
    cube: int = 64
    channels: int = 2
    n_z: int = 16
    codebook_size: int = 1024
    widths: tuple = (8, 16, 32)
    disc_widths: tuple = (8, 16, 32)
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    batch: int = 2
    steps: int = 100_000
    commitment_weight: float = 0.25
    codebook_weight: float = 1.0
    disc_weight: float = 0.1
    disc_start: float = 0.25
    dead_after: int = 1000
    codebook_update: str = "loss"
    paper_literal_hinge: bool = False
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.disc_widths = tuple(int(w) for w in self.disc_widths)
        if self.cube % DOWNSAMPLE:
            raise ValueError(f"cube {self.cube} is not divisible by the downsample factor {DOWNSAMPLE}")
        if self.codebook_update not in ("loss", "ema"):
            raise ValueError(f"codebook_update must be 'loss' or 'ema', got {self.codebook_update!r}")

    @property
    def latent_extent(self):
        return self.cube // DOWNSAMPLE

    def to_text(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, val = (s.strip() for s in line.split("=", 1))
            kw[key] = _parse(val, types[key])
        return cls(**kw)


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def _parse(val, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "tuple":
        return tuple(int(x) for x in val.split(",") if x.strip())
    if typ == "bool":
        return val.lower() in ("1", "true", "yes")
    if typ == "int":
        return int(float(val))
    if typ == "float":
        return float(val)
    return val


class ResBlock(Module):
    def __init__(self, ch, rng):
        self.norm1 = InstanceNorm3d(ch)
        self.conv1 = Conv3d(ch, ch, 3, rng=rng)
        self.norm2 = InstanceNorm3d(ch)
        self.conv2 = Conv3d(ch, ch, 3, rng=rng)

    def forward(self, x):
        h = self.conv1(ops.silu(self.norm1(x)))
        h = self.conv2(ops.silu(self.norm2(h)))
        return x + h


class Encoder(Module):
    """Single-channel volume -> n_z latent grid at 1/4 resolution."""

    def __init__(self, widths, n_z, rng):
        w0, w1, w2 = widths
        self.conv_in = Conv3d(1, w0, 3, rng=rng)
        self.down1 = Conv3d(w0, w1, 4, stride=2, padding=1, rng=rng)
        self.norm1 = InstanceNorm3d(w1)
        self.down2 = Conv3d(w1, w2, 4, stride=2, padding=1, rng=rng)
        self.norm2 = InstanceNorm3d(w2)
        self.res = [ResBlock(w2, rng), ResBlock(w2, rng)]
        self.norm_out = InstanceNorm3d(w2)
        self.conv_out = Conv3d(w2, n_z, 1, rng=rng)

    def forward(self, x):
        h = ops.silu(self.conv_in(x))
        h = ops.silu(self.norm1(self.down1(h)))
        h = ops.silu(self.norm2(self.down2(h)))
        for block in self.res:
            h = block(h)
        return self.conv_out(ops.silu(self.norm_out(h)))


class Decoder(Module):
    """Stacked per-channel latents -> all channels, bounded to [-1, 1] by tanh."""

    def __init__(self, widths, n_z, channels, rng):
        w0, w1, w2 = widths
        self.conv_in = Conv3d(channels * n_z, w2, 3, rng=rng)
        self.res = [ResBlock(w2, rng), ResBlock(w2, rng)]
        self.norm1 = InstanceNorm3d(w2)
        self.up1 = ConvTranspose3d(w2, w1, 4, 2, 1, rng=rng)
        self.norm2 = InstanceNorm3d(w1)
        self.up2 = ConvTranspose3d(w1, w0, 4, 2, 1, rng=rng)
        self.norm_out = InstanceNorm3d(w0)
        self.conv_out = Conv3d(w0, channels, 3, rng=rng)

    def forward(self, z):
        h = self.conv_in(z)
        for block in self.res:
            h = block(h)
        h = self.up1(ops.silu(self.norm1(h)))
        h = self.up2(ops.silu(self.norm2(h)))
        return ops.tanh(self.conv_out(ops.silu(self.norm_out(h))))


class Discriminator(Module):
    """Three stride-2 conv layers and a 3x3x3 head producing patch logits."""

    def __init__(self, channels, widths, rng):
        d0, d1, d2 = widths
        self.conv1 = Conv3d(channels, d0, 4, stride=2, padding=1, rng=rng)
        self.conv2 = Conv3d(d0, d1, 4, stride=2, padding=1, rng=rng)
        self.norm2 = InstanceNorm3d(d1)
        self.conv3 = Conv3d(d1, d2, 4, stride=2, padding=1, rng=rng)
        self.norm3 = InstanceNorm3d(d2)
        self.head = Conv3d(d2, 1, 3, rng=rng)

    def forward(self, x):
        h = ops.silu(self.conv1(x))
        h = ops.silu(self.norm2(self.conv2(h)))
        h = ops.silu(self.norm3(self.conv3(h)))
        return self.head(h)


@dataclass
class LatentPair:
    """Per-channel latent grids, each (n_z, d, h, w)."""

    cytoplasm: np.ndarray
    nucleus: np.ndarray
    quantized: bool = False

    def __post_init__(self):
        if self.cytoplasm.shape[1:] != self.nucleus.shape[1:]:
            raise ShapeError(f"latent grids differ: {self.cytoplasm.shape} vs {self.nucleus.shape}")

    def stacked(self):
        return np.stack([self.cytoplasm, self.nucleus])


class VQGAN(Module):
    def __init__(self, config):
        self.config = config
        ss = np.random.SeedSequence(config.seed).spawn(3 + config.channels)
        rngs = [np.random.default_rng(s) for s in ss]
        self.encoder = Encoder(config.widths, config.n_z, rngs[0])
        self.decoder = Decoder(config.widths, config.n_z, config.channels, rngs[1])
        self.disc = Discriminator(config.channels, config.disc_widths, rngs[2])
        self.codebooks = [
            Codebook(config.codebook_size, config.n_z, rngs[3 + c], name=f"codebooks.{c}.entries")
            for c in range(config.channels)
        ]

    def generator_parameters(self):
        params = self.encoder.parameters() + self.decoder.parameters()
        if self.config.codebook_update == "loss":
            params += [b.entries for b in self.codebooks]
        return params

    # ------------------------------------------------------------ building blocks

    def check_input(self, x):
        cfg = self.config
        shape = (cfg.channels, cfg.cube, cfg.cube, cfg.cube)
        if x.ndim != 5 or tuple(x.shape[1:]) != shape:
            raise ShapeError(f"expected volumes of shape (N, {', '.join(map(str, shape))}), got {x.shape}")
        if x.min() < -1 - 1e-4 or x.max() > 1 + 1e-4:
            raise ShapeError("input is not preprocessed: values outside [-1, 1]")

    def encode_batch(self, x):
        """(N, C, D, H, W) array -> Tensor (N, C, n_z, d, h, w) of unquantised latents."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
        self.check_input(x)
        N, C = x.shape[:2]
        z = self.encoder(Tensor(x.reshape((N * C, 1) + x.shape[2:])))
        return z.reshape((N, C) + z.shape[1:])

    def channel_rows(self, z, c):
        """Latent (N, C, n_z, d, h, w) -> (N*d*h*w, n_z) rows for channel ``c``."""
        zc = z[:, c]
        n_z = zc.shape[1]
        return zc.transpose(0, 2, 3, 4, 1).reshape(-1, n_z)

    def _rows_to_grid(self, rows, like_shape):
        N, _, n_z, d, h, w = like_shape
        return rows.reshape(N, d, h, w, n_z).transpose(0, 4, 1, 2, 3)

    def quantize_batch(self, z, count=True):
        """Quantise every channel; returns (decoder input, [QuantizeResult per channel], [rows per channel])."""
        results, rows, grids = [], [], []
        for c, book in enumerate(self.codebooks):
            r = self.channel_rows(z, c)
            q = quantize(r, book, count=count)
            rows.append(r)
            results.append(q)
            grids.append(self._rows_to_grid(q.quantized, z.shape))
        return ops.concat(grids, axis=1), results, rows

    def stack_latents(self, z):
        N, C, n_z = z.shape[:3]
        return z.reshape((N, C * n_z) + z.shape[3:])

    def decode_batch(self, zq):
        return self.decoder(zq)

    def reconstruct(self, x, batch=8):
        out = []
        for i in range(0, len(x), batch):
            z = self.encode_batch(x[i : i + batch])
            zq, _, _ = self.quantize_batch(z, count=False)
            out.append(self.decode_batch(zq).data)
        return np.concatenate(out)

    # ------------------------------------------------------------ volume-level API

    def encode(self, volume):
        if not is_preprocessed(volume, self.config.cube):
            raise ShapeError(f"volume must be preprocessed to a {self.config.cube}^3 cube in [-1, 1]")
        z = self.encode_batch(volume.data[None]).data[0]
        if self.config.channels != 2:
            raise ShapeError("LatentPair needs a two-channel model")
        return LatentPair(z[0].copy(), z[1].copy(), quantized=False)

    def decode(self, latents, quantize_first=True):
        z = latents.stacked()[None] if isinstance(latents, LatentPair) else np.asarray(latents)
        return CellVolume(self.decode_latents(z, quantize_first)[0])

    def decode_latents(self, z, quantize_first=True, batch=16):
        """Decode an (N, C, n_z, d, h, w) array of latents to (N, C, D, H, W) volumes."""
        z = np.asarray(z, dtype=np.float32)
        e = self.config.latent_extent
        if z.ndim != 6 or z.shape[1:] != (self.config.channels, self.config.n_z, e, e, e):
            raise ShapeError(
                f"latent extents {z.shape[1:]} do not match the model "
                f"({self.config.channels}, {self.config.n_z}, {e}, {e}, {e})"
            )
        out = []
        for i in range(0, len(z), batch):
            zt = Tensor(z[i : i + batch])
            dec_in = self.quantize_batch(zt, count=False)[0] if quantize_first else self.stack_latents(zt)
            out.append(self.decode_batch(dec_in).data)
        return np.concatenate(out)

    def quantize_latents(self, z):
        """Replace every latent vector by its codebook entry (array in, array out)."""
        z = np.asarray(z, dtype=np.float32)
        out = np.empty_like(z)
        zt = Tensor(z)
        for c, book in enumerate(self.codebooks):
            q = quantize(self.channel_rows(zt, c), book, count=False)
            out[:, c] = self._rows_to_grid(Tensor(q.quantized.data), zt.shape).data
        return out

    # ------------------------------------------------------------ persistence

    def save(self, prefix, with_optimizer=True):
        os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
        arrays = dict(self.named_parameters())
        arrays = {k: v.data for k, v in arrays.items()}
        for c, book in enumerate(self.codebooks):
            arrays[f"codebooks.{c}.usage_counts"] = book.usage_counts.astype(np.float32)
        save_weights(prefix + ".mfwt", arrays)
        if with_optimizer:
            save_optimizer(prefix + ".mfos", self.named_parameters())
        with open(prefix + ".cfg", "w") as fh:
            fh.write(self.config.to_text())

    @classmethod
    def load(cls, prefix):
        if not os.path.exists(prefix + ".cfg") or not os.path.exists(prefix + ".mfwt"):
            raise CheckpointError(f"no VQGAN checkpoint at {prefix}(.cfg/.mfwt)")
        with open(prefix + ".cfg") as fh:
            model = cls(VqganConfig.from_text(fh.read()))
        state = load_weights(prefix + ".mfwt")
        model.load_state_dict(state)
        for c, book in enumerate(model.codebooks):
            key = f"codebooks.{c}.usage_counts"
            if key in state:
                book.usage_counts = state[key].astype(np.int64)
            book.initialised = True
        if os.path.exists(prefix + ".mfos"):
            load_optimizer(prefix + ".mfos", model.named_parameters())
        return model


# ---------------------------------------------------------------- losses


def reconstruction_loss(x, x_hat):
    """Half the sum of per-channel mean squared errors."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction: {x.shape} vs {x_hat.shape}")
    C = x.shape[1]
    terms = [ops.mse(x_hat[:, c], x[:, c]) for c in range(C)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ops.mul(total, 1.0 / C)


def discriminator_loss(d_real, d_fake, paper_literal_hinge=False):
    """Hinge loss on patch logits, halved.

    The default penalises fakes with ``relu(1 + D(x_hat))``; the literal
    variant uses ``relu(1 - D(x_hat))`` for both terms.
    """
    fake_term = ops.hinge_relu(d_fake) if paper_literal_hinge else ops.hinge_relu(ops.mul(d_fake, -1.0))
    return ops.mul(ops.add(ops.mean(ops.hinge_relu(d_real)), ops.mean(fake_term)), 0.5)


def generator_adv_loss(d_fake):
    return ops.mul(ops.mean(d_fake), -1.0)


def vqgan_losses(x, x_hat, disc, vq, disc_weight=0.1, paper_literal_hinge=False):
    """All stage-1 losses for one batch.

    ``vq`` is the :func:`vq_losses` dict.  The discriminator term sees a
    detached reconstruction, so ``total_D`` never reaches the generator.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if x.shape != x_hat.shape:
        raise ShapeError(f"vqgan_losses: x {x.shape} vs x_hat {x_hat.shape}")
    l_rec = reconstruction_loss(x, x_hat)
    l_comm = vq["commitment_loss"]
    l_disc = discriminator_loss(disc(x), disc(x_hat.detach()), paper_literal_hinge)
    l_gen = generator_adv_loss(disc(x_hat))
    total_g = l_rec + l_comm + ops.mul(l_gen, disc_weight)
    if "codebook_loss" in vq:
        total_g = total_g + vq["codebook_loss"]
    return {"L_rec": l_rec, "L_comm": l_comm, "L_disc": l_disc, "L_gen": l_gen, "total_G": total_g, "total_D": l_disc}


# ---------------------------------------------------------------- training


def train_vqgan(data, config, log_path=None, model=None, progress_every=100):
    """Alternating generator/discriminator Adam training on preprocessed volumes.

    ``data`` is an (N, C, D, H, W) float array.  Returns the trained model; the
    per-step losses go to ``log_path`` as CSV when given.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 5 or len(data) == 0:
        raise ValueError("train_vqgan needs a non-empty (N, C, D, H, W) dataset")
    model = model or VQGAN(config)
    model.check_input(data[:1])
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    opt_g = Adam(model.generator_parameters(), config.lr, config.beta1, config.beta2)
    opt_d = Adam(model.disc.parameters(), config.lr, config.beta1, config.beta2)
    adv_from = int(config.disc_start * config.steps)
    rows_log = []
    writer = None
    fh = None
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
    try:
        for step in range(config.steps):
            batch = data[rng.choice(len(data), size=min(config.batch, len(data)), replace=False)]
            adversarial = step >= adv_from and config.disc_weight > 0
            gen_params = opt_g.params
            with Tape() as tape:
                z = model.encode_batch(batch)
                if not all(b.initialised for b in model.codebooks):
                    for c, book in enumerate(model.codebooks):
                        book.init_from(model.channel_rows(z, c).data, rng)
                zq, qres, rows = model.quantize_batch(z)
                vq = vq_losses(rows, [q.selected for q in qres], config.commitment_weight, config.codebook_weight)
                x_hat = model.decode_batch(zq)
                x = Tensor(batch)
                l_rec = reconstruction_loss(x, x_hat)
                total = l_rec + vq["commitment_loss"]
                if config.codebook_update == "loss":
                    total = total + vq["codebook_loss"]
                l_gen = None
                if adversarial:
                    l_gen = generator_adv_loss(model.disc(x_hat))
                    total = total + ops.mul(l_gen, config.disc_weight)
                values = [l_rec.item(), vq["commitment_loss"].item(), total.item()]
                if not np.isfinite(values).all():
                    raise NumericAbort(step)
                tape.backward(total, params=gen_params)
            opt_g.step()
            model.disc.zero_grad()
            for c, (book, q) in enumerate(zip(model.codebooks, qres)):
                if config.codebook_update == "ema":
                    book.ema_update(rows[c].data, q.indices)
                book.mark_step(q.indices)
                book.revive_dead(rows[c].data, rng, config.dead_after)
            l_disc_v = 0.0
            if adversarial:
                with Tape() as tape:
                    l_disc = discriminator_loss(model.disc(x), model.disc(x_hat.detach()), config.paper_literal_hinge)
                    l_disc_v = l_disc.item()
                    if not np.isfinite(l_disc_v):
                        raise NumericAbort(step)
                    tape.backward(l_disc, params=opt_d.params)
                opt_d.step()
            row = [step, values[0], values[1], l_disc_v, l_gen.item() if l_gen is not None else 0.0]
            rows_log.append(row)
            if writer:
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
            if progress_every and (step + 1) % progress_every == 0:
                recent = np.mean([r[1] for r in rows_log[-progress_every:]])
                log.info("vqgan step %d/%d  l_rec %.5f", step + 1, config.steps, recent)
    finally:
        if fh:
            fh.close()
    model.train_log = rows_log
    return model
