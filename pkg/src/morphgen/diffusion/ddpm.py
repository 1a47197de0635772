"""Latent DDPM: training, ancestral sampling, bridging and trajectory traversal.

Latents are the unquantised stage-1 encoder outputs with the per-channel
feature axes stacked, shape (N, C * n_z, d, h, w), multiplied by a scale
factor fixed at training time so the diffusion space has unit variance.
"""
import csv
import logging
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..autodiff import EMA, Adam, Tape, Tensor, load_optimizer, load_weights, ops, save_optimizer, save_weights
from ..errors import CheckpointError, DegenerateInputError, EmptySurfaceError, NumericAbort, OpenMeshError, ShapeError
from ..morphology import DescriptorVector, describe_volume
from ..volume import CellVolume
from .schedule import StepRangeError, build_schedule, q_sample
from .unet import DualUNet

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "t", "l1"]


@dataclass
class DdpmConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base: int = 16
    mults: tuple = (1, 2, 4, 8)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    batch: int = 2
    steps: int = 100_000
    ema_decay: float = 0.995
    cond_channels: int = 0
    seed: int = 0
    # filled in by training
    channels: int = 0
    spatial: int = 0
    latent_scale: float = 1.0
    cond_scale: float = 1.0
    label: str = ""

    def __post_init__(self):
        self.mults = tuple(int(m) for m in self.mults)

    def to_text(self):
        out = []
        for k, v in asdict(self).items():
            v = ",".join(map(str, v)) if isinstance(v, tuple) else (repr(v) if isinstance(v, float) else str(v))
            out.append(f"{k} = {v}\n")
        return "".join(out)

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, val = (s.strip() for s in line.split("=", 1))
            typ = types[key] if isinstance(types[key], str) else types[key].__name__
            if typ == "tuple":
                kw[key] = tuple(int(x) for x in val.split(",") if x)
            elif typ == "int":
                kw[key] = int(val)
            elif typ == "float":
                kw[key] = float(val)
            else:
                kw[key] = val
        return cls(**kw)


class DdpmModel:
    """A trained noise predictor with its EMA shadow, schedule and latent scale."""

    def __init__(self, config):
        if config.channels < 1 or config.spatial < 1:
            raise ValueError("config.channels and config.spatial must describe the latent grid")
        self.config = config
        self.schedule = build_schedule(config.T, config.beta_start, config.beta_end)
        self.net = DualUNet(config.channels, config.spatial, config.base, config.mults, config.cond_channels, config.seed)
        self.ema = EMA(self.net.parameters(), config.ema_decay)
        self._ema_net = None
        self.train_log = []

    @property
    def latent_shape(self):
        c = self.config
        return (c.channels, c.spatial, c.spatial, c.spatial)

    @property
    def latent_scale(self):
        return self.config.latent_scale

    def sampling_net(self):
        """A UNet carrying the EMA weights (built lazily, refreshed after training)."""
        if self._ema_net is None:
            c = self.config
            net = DualUNet(c.channels, c.spatial, c.base, c.mults, c.cond_channels, c.seed)
            for p, s in zip(net.parameters(), self.ema.shadow):
                p.data = s.copy()
            self._ema_net = net
        return self._ema_net

    def predict_noise(self, z, t, cond=None, use_ema=True):
        net = self.sampling_net() if use_ema else self.net
        return net(Tensor(np.asarray(z, dtype=np.float32)), t, cond).data

    def save(self, prefix, with_optimizer=True):
        os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
        arrays = {f"net.{k}": v for k, v in self.net.state_dict().items()}
        names = [k for k, _ in self.net.named_parameters()]
        arrays.update({f"ema.{k}": s for k, s in zip(names, self.ema.shadow)})
        save_weights(prefix + ".mfwt", arrays)
        if with_optimizer:
            save_optimizer(prefix + ".mfos", [(f"net.{k}", p) for k, p in self.net.named_parameters()])
        with open(prefix + ".cfg", "w") as fh:
            fh.write(self.config.to_text())

    @classmethod
    def load(cls, prefix):
        if not (os.path.exists(prefix + ".cfg") and os.path.exists(prefix + ".mfwt")):
            raise CheckpointError(f"no DDPM checkpoint at {prefix}(.cfg/.mfwt)")
        with open(prefix + ".cfg") as fh:
            model = cls(DdpmConfig.from_text(fh.read()))
        state = load_weights(prefix + ".mfwt")
        model.net.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("net.")})
        for (name, _), i in zip(model.net.named_parameters(), range(len(model.ema.shadow))):
            key = f"ema.{name}"
            if key not in state:
                raise CheckpointError(f"checkpoint lacks EMA weights for {name}")
            model.ema.shadow[i] = state[key].astype(model.ema.shadow[i].dtype)
        if os.path.exists(prefix + ".mfos"):
            load_optimizer(prefix + ".mfos", [(f"net.{k}", p) for k, p in model.net.named_parameters()])
        return model


# ---------------------------------------------------------------- helpers


def flatten_latents(z):
    """(N, C, n_z, d, h, w) -> (N, C * n_z, d, h, w); 5-D input passes through."""
    z = np.asarray(z, dtype=np.float32)
    if z.ndim == 6:
        return z.reshape((z.shape[0], z.shape[1] * z.shape[2]) + z.shape[3:])
    if z.ndim != 5:
        raise ShapeError(f"latents must be 5-D or 6-D, got shape {z.shape}")
    return z


def latent_scale_factor(z):
    std = float(np.asarray(z, dtype=np.float64).std())
    if not std > 0:
        raise ShapeError("latents have zero variance; cannot fix a scale factor")
    return 1.0 / std


def sample_streams(seed, n):
    """Independent per-sample generators derived from a master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def _draw(rngs, shape):
    return np.stack([g.standard_normal(shape) for g in rngs]).astype(np.float32)


# ---------------------------------------------------------------- training


def sample_timesteps(rng, T, n):
    """Training steps drawn uniformly from 1..T."""
    return rng.integers(1, T + 1, size=n)


def train_ddpm(latents, config, cond=None, log_path=None, progress_every=500):
    """Train on frozen stage-1 latents with the L1 noise-prediction objective.

    ``cond`` holds conditioning latents (same batch order) when the model is
    conditioned.  Returns a :class:`DdpmModel`.
    """
    z = flatten_latents(latents)
    if len(z) == 0:
        raise ValueError("train_ddpm needs at least one latent")
    if not np.isfinite(z).all():
        raise ShapeError("latents contain non-finite values")
    cfg = DdpmConfig(**asdict(config))
    cfg.channels, cfg.spatial = z.shape[1], z.shape[2]
    if not (z.shape[2] == z.shape[3] == z.shape[4]):
        raise ShapeError(f"latent grids must be cubic, got {z.shape[2:]}")
    cfg.latent_scale = latent_scale_factor(z)
    zs = z * np.float32(cfg.latent_scale)
    cs = None
    if cond is not None:
        c = flatten_latents(cond)
        if len(c) != len(z) or c.shape[2:] != z.shape[2:]:
            raise ShapeError(f"conditioning latents {c.shape} do not pair with {z.shape}")
        cfg.cond_channels = c.shape[1]
        cfg.cond_scale = latent_scale_factor(c)
        cs = c * np.float32(cfg.cond_scale)
    elif cfg.cond_channels:
        raise ShapeError("config asks for conditioning but no conditioning latents were given")

    model = DdpmModel(cfg)
    sched = model.schedule
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    opt = Adam(model.net.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
    fh = writer = None
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
    try:
        for step in range(cfg.steps):
            idx = rng.choice(len(zs), size=min(cfg.batch, len(zs)), replace=False)
            t = sample_timesteps(rng, cfg.T, len(idx))
            noise = rng.standard_normal(zs[idx].shape).astype(np.float32)
            zt = q_sample(zs[idx], t, noise, sched)
            with Tape() as tape:
                pred = model.net(Tensor(zt), t, None if cs is None else Tensor(cs[idx]))
                loss = ops.l1(pred, Tensor(noise))
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericAbort(step)
                tape.backward(loss, params=opt.params)
            opt.step()
            model.ema.update()
            model.train_log.append((step, value))
            if writer:
                writer.writerow([step, " ".join(map(str, t)), repr(value)])
            if progress_every and (step + 1) % progress_every == 0:
                recent = np.mean([v for _, v in model.train_log[-progress_every:]])
                log.info("ddpm step %d/%d  l1 %.4f", step + 1, cfg.steps, recent)
    finally:
        if fh:
            fh.close()
    model._ema_net = None
    return model


# ---------------------------------------------------------------- reverse process


def p_sample_step(z_t, t, model, schedule=None, rng=None, cond=None, eps=None):
    """One ancestral step ``z_t -> z_{t-1}`` with fixed variance ``beta_t``.

    ``model`` is a :class:`DdpmModel` or any callable ``(z, t, cond) -> eps``.
    ``rng`` is one generator or a sequence with one generator per batch row.
    No noise is drawn at ``t == 1``.
    """
    schedule = schedule or model.schedule
    if not np.isscalar(t) and np.ndim(t) != 0:
        raise StepRangeError("p_sample_step takes a single integer step")
    t = int(t)
    schedule.check_step(t)
    z_t = np.asarray(z_t, dtype=np.float32)
    if eps is None:
        eps = model.predict_noise(z_t, t, cond) if isinstance(model, DdpmModel) else np.asarray(model(z_t, t, cond))
    beta = schedule.beta[t - 1]
    alpha = schedule.alpha[t - 1]
    abar = schedule.alpha_bar[t - 1]
    mean = (z_t - (beta / np.sqrt(1.0 - abar)) * eps) / np.sqrt(alpha)
    if t == 1:
        return mean.astype(np.float32)
    if rng is None:
        raise ValueError("p_sample_step needs an rng for t > 1")
    rngs = rng if isinstance(rng, (list, tuple)) else None
    noise = _draw(rngs, z_t.shape[1:]) if rngs is not None else rng.standard_normal(z_t.shape).astype(np.float32)
    return (mean + np.sqrt(beta) * noise).astype(np.float32)


def reverse_chain(z, t_start, model, rngs, cond=None, record=None):
    """Run steps ``t_start .. 1``; optionally keep copies of the state at ``record`` steps."""
    kept = {}
    if record is not None and t_start in record:
        kept[t_start] = z.copy()
    for t in range(t_start, 0, -1):
        z = p_sample_step(z, t, model, rng=rngs, cond=cond)
        if record is not None and (t - 1) in record:
            kept[t - 1] = z.copy()
    return (z, kept) if record is not None else z


def _decode(z_scaled, model, decoder):
    z = z_scaled / np.float32(model.latent_scale)
    cfg = decoder.config
    z = z.reshape((len(z), cfg.channels, cfg.n_z) + z.shape[2:])
    return decoder.decode_latents(z, quantize_first=True)


def _check_geometry(model, decoder):
    cfg = decoder.config
    want = (cfg.channels * cfg.n_z,) + (cfg.latent_extent,) * 3
    if model.latent_shape != want:
        raise CheckpointError(f"DDPM latent shape {model.latent_shape} does not match the decoder's {want}")


def sample_unconditional(model, decoder, n, seed=0, batch=100):
    """``n`` volumes (array (n, C, D, H, W)) from pure noise through T reverse steps."""
    _check_geometry(model, decoder)
    if n == 0:
        cfg = decoder.config
        return np.zeros((0, cfg.channels) + (cfg.cube,) * 3, dtype=np.float32)
    streams = sample_streams(seed, n)
    out = []
    for i in range(0, n, batch):
        rngs = streams[i : i + batch]
        z = _draw(rngs, model.latent_shape)
        z = reverse_chain(z, model.config.T, model, rngs)
        out.append(_decode(z, model, decoder))
    return np.concatenate(out)


def _bridge_start(x, source, target, encoder, t_bridge, rngs):
    if source.latent_shape != target.latent_shape:
        raise ShapeError(f"source latents {source.latent_shape} and target latents {target.latent_shape} differ")
    _check_geometry(target, encoder)
    t_bridge = int(t_bridge)
    if not 1 <= t_bridge <= min(source.config.T, target.config.T):
        raise StepRangeError(f"t_bridge {t_bridge} outside [1, {min(source.config.T, target.config.T)}]")
    noise = _draw(rngs, target.latent_shape)
    if t_bridge == target.config.T:
        # full depth: the encoded input carries no weight, start from the noise itself
        return noise, t_bridge
    z0 = flatten_latents(encoder.encode_batch(x).data) * np.float32(source.latent_scale)
    zt = q_sample(z0, t_bridge, noise, source.schedule)
    if source.latent_scale != target.latent_scale:
        zt = zt * np.float32(target.latent_scale / source.latent_scale)
    return zt, t_bridge


def _as_batch(x):
    if isinstance(x, CellVolume):
        return x.data[None]
    x = np.asarray(x, dtype=np.float32)
    return x[None] if x.ndim == 4 else x


def bridge_conditional(x_source, source, target, encoder, t_bridge, seed=0, batch=100):
    """Noise inputs to ``t_bridge`` under the source model, then denoise under the target.

    ``x_source`` is a CellVolume or an (N, C, D, H, W) batch; ``encoder`` is the
    shared stage-1 model used both to encode and to decode.  Sample ``i`` uses
    the same RNG stream as sample ``i`` of :func:`sample_unconditional`.
    """
    x = _as_batch(x_source)
    streams = sample_streams(seed, len(x))
    out = []
    for i in range(0, len(x), batch):
        rngs = streams[i : i + batch]
        zt, tb = _bridge_start(x[i : i + batch], source, target, encoder, t_bridge, rngs)
        out.append(_decode(reverse_chain(zt, tb, target, rngs), target, encoder))
    res = np.concatenate(out)
    return CellVolume(res[0]) if isinstance(x_source, CellVolume) else res


@dataclass
class TrajectoryEntry:
    t: int
    volume: CellVolume
    descriptors: list  # one DescriptorVector per channel


def safe_descriptors(volume):
    """Descriptors per channel, NaN-filled when a channel has no usable surface."""
    out = []
    for c in range(volume.channels):
        try:
            out.append(describe_volume(CellVolume(volume.data[c : c + 1]))[0])
        except (EmptySurfaceError, OpenMeshError, DegenerateInputError):
            out.append(DescriptorVector(*([float("nan")] * 5)))
    return out


def traverse_trajectory(x_source, source, target, encoder, t_bridge, stride, seed=0):
    """Decode snapshots along a bridge.

    The bridge chain runs from ``t_bridge`` to 0 with the bridge's own RNG
    stream.  For every recorded ``t`` the chain state ``z_t`` is denoised for
    exactly ``t`` further steps on a side stream derived from ``(seed, t)``,
    decoded and described.  The ``t = 0`` entry is the bridge output itself.
    """
    stride = int(stride)
    if stride < 1 or int(t_bridge) % stride:
        raise ValueError(f"stride {stride} must be positive and divide t_bridge {t_bridge}")
    x = _as_batch(x_source)
    if len(x) != 1:
        raise ShapeError("traverse_trajectory follows a single source volume")
    rngs = sample_streams(seed, 1)
    zt, tb = _bridge_start(x, source, target, encoder, t_bridge, rngs)
    steps = list(range(tb, -1, -stride))
    z0, kept = reverse_chain(zt, tb, target, rngs, record=set(steps))
    entries = []
    for t in steps:
        if t == 0:
            z = z0
        else:
            side = [np.random.default_rng(np.random.SeedSequence([int(seed), 1, t]))]
            z = reverse_chain(kept[t].copy(), t, target, side)
        vol = CellVolume(_decode(z, target, encoder)[0])
        entries.append(TrajectoryEntry(t, vol, safe_descriptors(vol)))
    return entries


# ---------------------------------------------------------------- signal synthesis


def synthesize_signal_channel(morphology, signal_model, morph_encoder, signal_decoder, seed=0, batch=100):
    """Generate a one-channel signal volume conditioned on morphology latents.

    ``morphology`` is a CellVolume or (N, 2, D, H, W) batch; ``morph_encoder``
    produces the conditioning latents, ``signal_decoder`` is the one-channel
    stage-1 model for the signal.
    """
    if not signal_model.config.cond_channels:
        raise ShapeError("signal model was trained without morphology conditioning")
    _check_geometry(signal_model, signal_decoder)
    x = _as_batch(morphology)
    streams = sample_streams(seed, len(x))
    out = []
    for i in range(0, len(x), batch):
        rngs = streams[i : i + batch]
        c = flatten_latents(morph_encoder.encode_batch(x[i : i + batch]).data)
        if c.shape[1] != signal_model.config.cond_channels:
            raise ShapeError(f"conditioning has {c.shape[1]} channels, model expects {signal_model.config.cond_channels}")
        c = c * np.float32(signal_model.config.cond_scale)
        z = _draw(rngs, signal_model.latent_shape)
        z = reverse_chain(z, signal_model.config.T, signal_model, rngs, cond=c)
        out.append(_decode(z, signal_model, signal_decoder))
    res = np.concatenate(out)
    return CellVolume(res[0]) if isinstance(morphology, CellVolume) else res
