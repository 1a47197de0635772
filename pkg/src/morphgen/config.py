"""Run configuration: a line-based ``key = value`` file with typed defaults."""
import os
from dataclasses import asdict, dataclass, fields

from .diffusion import DdpmConfig
from .errors import ConfigError
from .vqgan import VqganConfig


@dataclass
class RunConfig:
    # shared
    cube: int = 32
    seed: int = 0
    # stage 1
    vq_lr: float = 3e-4
    vq_batch: int = 2
    vq_steps: int = 2000
    vq_beta1: float = 0.9
    vq_beta2: float = 0.99
    n_z: int = 16
    codebook_size: int = 1024
    vq_widths: tuple = (8, 16, 32)
    disc_widths: tuple = (8, 16, 32)
    commitment_weight: float = 0.25
    codebook_weight: float = 1.0
    disc_weight: float = 0.1
    disc_start: float = 0.25
    dead_after: int = 1000
    codebook_update: str = "loss"
    paper_literal_hinge: bool = False
    # stage 2
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    ddpm_lr: float = 5e-4
    ddpm_batch: int = 2
    ddpm_steps: int = 12000
    ddpm_beta1: float = 0.9
    ddpm_beta2: float = 0.99
    ddpm_base: int = 8
    mults: tuple = (1, 2, 4, 8)
    ema_decay: float = 0.995
    # sampling and analysis
    n_samples: int = 100
    t_bridge_fraction: float = 0.3
    stride: int = 10
    n_cells: int = 100
    k: int = 3
    recall_fraction: float = 0.05
    dilate_iters: int = 7

    def vqgan_config(self, channels=2):
        return VqganConfig(
            cube=self.cube,
            channels=channels,
            n_z=self.n_z,
            codebook_size=self.codebook_size,
            widths=self.vq_widths,
            disc_widths=self.disc_widths,
            lr=self.vq_lr,
            beta1=self.vq_beta1,
            beta2=self.vq_beta2,
            batch=self.vq_batch,
            steps=self.vq_steps,
            commitment_weight=self.commitment_weight,
            codebook_weight=self.codebook_weight,
            disc_weight=self.disc_weight,
            disc_start=self.disc_start,
            dead_after=self.dead_after,
            codebook_update=self.codebook_update,
            paper_literal_hinge=self.paper_literal_hinge,
            seed=self.seed,
        )

    def ddpm_config(self, label=""):
        return DdpmConfig(
            T=self.T,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            base=self.ddpm_base,
            mults=self.mults,
            lr=self.ddpm_lr,
            beta1=self.ddpm_beta1,
            beta2=self.ddpm_beta2,
            batch=self.ddpm_batch,
            steps=self.ddpm_steps,
            ema_decay=self.ema_decay,
            seed=self.seed,
            label=label,
        )

    @property
    def t_bridge(self):
        return max(1, int(round(self.t_bridge_fraction * self.T)))

    # ------------------------------------------------------------ text form

    def to_text(self):
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}\n")
        return "".join(lines)

    def write(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def update(self, values):
        """Apply ``{key: value}`` overrides; string values are parsed by field type."""
        types = _field_types()
        for key, val in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, parse_value(key, val, types[key]) if isinstance(val, str) else val)
        return self

    @classmethod
    def from_text(cls, text, source="<config>"):
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key in values:
                raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
            values[key] = val
        return cls().update(values)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, source=path)


def _field_types():
    return {f.name: (f.type if isinstance(f.type, str) else f.type.__name__) for f in fields(RunConfig)}


def parse_value(key, val, typ):
    try:
        if typ == "tuple":
            return tuple(int(x) for x in val.split(",") if x.strip())
        if typ == "bool":
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {val!r} as {typ}") from None
