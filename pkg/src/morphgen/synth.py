"""Procedural two-channel cell volumes with perturbation archetypes.

A cell is an implicit solid: an ellipsoid body plus elongated Gaussian ridges
(protrusions) pointing along random directions.  The nucleus is a smaller
ellipsoid nested inside the body.  Intensities fall off smoothly at each
boundary and carry a little additive noise.
"""
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .volume import CellVolume, write_volume

MANIFEST_HEADER = ["sample_id", "archetype", "seed"]


@dataclass
class Archetype:
    """Shape-class parameters; ranges are (low, high) uniform draws.

    Lengths are in units of the half cube edge.
    """

    name: str
    radius: tuple = (0.5, 0.6)
    axis_jitter: float = 0.15  # relative spread of the three semi-axes
    protrusions: tuple = (1, 3)  # inclusive count range
    protrusion_length: tuple = (0.25, 0.4)
    protrusion_width: tuple = (0.08, 0.11)
    nucleus_scale: tuple = (0.35, 0.45)
    noise: float = 0.02
    # signal rule: levels in [-1, 1] for nucleus and cytoplasm, background -1
    signal_nucleus: tuple = (0.6, 1.0)
    signal_cytoplasm: tuple = (-0.4, 0.0)


ARCHETYPES = {
    "control": Archetype("control"),
    "round": Archetype(
        "round",
        radius=(0.55, 0.65),
        axis_jitter=0.04,
        protrusions=(0, 0),
        signal_nucleus=(0.6, 1.0),
        signal_cytoplasm=(-0.6, -0.2),
    ),
    "protrusive": Archetype(
        "protrusive",
        radius=(0.36, 0.44),
        axis_jitter=0.12,
        protrusions=(4, 6),
        protrusion_length=(0.35, 0.48),
        protrusion_width=(0.09, 0.12),
        signal_nucleus=(-0.2, 0.2),
        signal_cytoplasm=(0.2, 0.6),
    ),
}


def get_archetype(name):
    if isinstance(name, Archetype):
        return name
    try:
        return ARCHETYPES[name]
    except KeyError:
        raise ValueError(f"unknown archetype {name!r}; choose from {sorted(ARCHETYPES)}") from None


@dataclass
class SyntheticCell:
    volume: CellVolume  # channels (cytoplasm, nucleus), raw intensities in [0, 1] plus noise
    cytoplasm_mask: np.ndarray
    nucleus_mask: np.ndarray
    signal: np.ndarray = field(default=None)  # ERK-style channel in [-1, 1]
    archetype: str = ""
    seed: int = 0


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _unit_vectors(rng, n, min_angle=0.7):
    """Up to ``n`` random directions kept at least ``min_angle`` radians apart."""
    out = []
    for _ in range(50 * max(n, 1)):
        if len(out) == n:
            break
        v = rng.standard_normal(3)
        v /= np.linalg.norm(v)
        if all(np.arccos(np.clip(v @ u, -1, 1)) >= min_angle for u in out):
            out.append(v)
    return np.array(out).reshape(-1, 3)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def generate_cell(archetype, seed, cube=32, with_signal=False):
    """One cell on a ``cube``^3 grid, deterministic in ``seed``."""
    arch = get_archetype(archetype)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    half = cube / 2.0
    grid = (np.indices((cube, cube, cube), dtype=np.float64) + 0.5 - half) / half
    pts = grid.reshape(3, -1).T  # (P, 3), coordinates in [-1, 1]

    r0 = rng.uniform(*arch.radius)
    axes = r0 * (1.0 + arch.axis_jitter * rng.uniform(-1, 1, 3))
    rot = _random_rotation(rng)
    local = pts @ rot
    rho = np.sqrt(((local / axes) ** 2).sum(1))
    body = 1.0 - rho  # > 0 inside the ellipsoid, ~unit slope per semi-axis

    field_c = body.copy()
    n_prot = int(rng.integers(arch.protrusions[0], arch.protrusions[1] + 1))
    for d in _unit_vectors(rng, n_prot):
        length = rng.uniform(*arch.protrusion_length)
        width = rng.uniform(*arch.protrusion_width)
        # surface point of the ellipsoid along d
        d_loc = d @ rot
        base = 1.0 / np.sqrt(((d_loc / axes) ** 2).sum())
        s = pts @ d
        perp2 = (pts * pts).sum(1) - s * s
        along = _sigmoid((base + length - s) / 0.03) * _sigmoid(s / 0.05)
        ridge = np.exp(-perp2 / (2 * width**2)) * along
        # the ridge is solid where it exceeds one half
        field_c = np.maximum(field_c, 2.0 * (ridge - 0.5))

    scale = rng.uniform(*arch.nucleus_scale)
    n_axes = axes * scale
    offset_room = (1.0 - scale) * axes.min() * 0.3
    offset = rng.uniform(-1, 1, 3) * offset_room
    rho_n = np.sqrt((((local - offset) / n_axes) ** 2).sum(1))
    field_n = 1.0 - rho_n

    shape = (cube, cube, cube)
    cyto_mask = (field_c > 0).reshape(shape)
    nuc_mask = (field_n > 0).reshape(shape) & cyto_mask

    tau = 2.0 / half  # boundary falloff of about two voxels
    shade = 1.0 - 0.3 * np.clip(rho, 0.0, 1.0) ** 2
    cyto = _sigmoid(field_c * axes.mean() / tau) * shade
    nuc = _sigmoid(field_n * n_axes.mean() / tau) * _sigmoid(field_c * axes.mean() / tau)
    data = np.stack([cyto.reshape(shape), nuc.reshape(shape)])
    data += arch.noise * rng.standard_normal(data.shape)
    cell = SyntheticCell(
        CellVolume(data.astype(np.float32)), cyto_mask, nuc_mask, archetype=arch.name, seed=int(seed)
    )
    if with_signal:
        level_n = rng.uniform(*arch.signal_nucleus)
        level_c = rng.uniform(*arch.signal_cytoplasm)
        sig = np.full(shape, -1.0)
        sig[cyto_mask] = level_c
        sig[nuc_mask] = level_n
        cell.signal = sig.astype(np.float32)
    return cell


def cell_seeds(seed, n):
    """Independent per-cell seeds derived from a master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def generate_dataset(archetype, n, seed, out_dir=None, cube=32, with_signal=False):
    """``n`` cells; with ``out_dir`` each is written as ``<sample_id>.mvol`` plus ``manifest.csv``.

    Returns the list of :class:`SyntheticCell`.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    arch = get_archetype(archetype)
    cells = [generate_cell(arch, s, cube, with_signal) for s in cell_seeds(seed, n)]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        rows = []
        for i, cell in enumerate(cells):
            sid = f"{arch.name}_{i:05d}"
            write_volume(os.path.join(out_dir, sid + ".mvol"), cell.volume)
            if with_signal:
                write_volume(os.path.join(out_dir, sid + ".signal.mvol"), CellVolume(cell.signal[None]))
            rows.append([sid, arch.name, cell.seed])
        with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MANIFEST_HEADER)
            w.writerows(rows)
    return cells
