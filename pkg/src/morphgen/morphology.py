"""Thresholding, surface extraction and classical 3D shape descriptors.

Descriptor definitions:

* volume: signed-tetrahedron sum over the closed mesh (voxel^3)
* surface_area: sum of triangle areas (voxel^2)
* sphericity: pi^(1/3) (6 V)^(2/3) / A, 1 for a perfect sphere
* eccentricity: sqrt(1 - lambda_min / lambda_max) of the covariance of the
  foreground voxel coordinates
* protrusivity: 1 - V / V_hull, with V_hull the convex-hull volume of the
  mesh vertices
"""
import csv
import logging
import os
from dataclasses import astuple, dataclass, fields

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial import QhullError

from .errors import DegenerateInputError, EmptySurfaceError, OpenMeshError, ShapeError
from .kernels import marching_cubes

log = logging.getLogger(__name__)

DESCRIPTOR_HEADER = ["sample_id", "channel", "volume", "surface_area", "sphericity", "eccentricity", "protrusivity"]


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64, outward winding

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ShapeError("mesh face references a vertex that does not exist")

    def face_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def edge_counts(self):
        """Occurrences of every undirected edge across all faces."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_closed(self):
        return len(self.faces) > 0 and bool(np.all(self.edge_counts() == 2))

    def euler_characteristic(self):
        return len(self.vertices) - len(self.edge_counts()) + len(self.faces)

    def signed_volume(self):
        v = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def surface_area(self):
        return float(self.face_areas().sum())


@dataclass
class DescriptorVector:
    volume: float
    surface_area: float
    sphericity: float
    eccentricity: float
    protrusivity: float

    def as_array(self):
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- thresholding


def otsu_from_histogram(counts):
    """Index ``i`` of the split (class 0 = bins 0..i) maximising between-class variance.

    Ties resolve to the lowest index.  Bin positions are the bin indices; any
    affine relabelling of bin centres yields the same argmax.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) < 2:
        raise ValueError("need a 1-D histogram with at least two bins")
    centres = np.arange(len(counts), dtype=np.float64)
    n0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(counts * centres)[:-1]
    n, s = counts.sum(), (counts * centres).sum()
    n1, s1 = n - n0, s - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = s0 / n0
        mu1 = s1 / n1
        between = n0 * n1 * (mu0 - mu1) ** 2
    between = np.where((n0 > 0) & (n1 > 0), between, -np.inf)
    return int(np.argmax(between))


def otsu_threshold(channel, bins=256):
    """Otsu threshold over a ``bins``-bin histogram spanning [min, max].

    Foreground is ``channel > threshold``; the threshold is the upper edge of
    the last background bin.
    """
    x = np.asarray(channel, dtype=np.float64).ravel()
    lo, hi = x.min(), x.max()
    if not hi > lo:
        raise DegenerateInputError(f"Otsu threshold undefined for a constant grid (value {lo})")
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    return float(edges[otsu_from_histogram(counts) + 1])


# ---------------------------------------------------------------- meshes


def extract_mesh(channel, threshold, pad=True):
    """Isosurface ``channel == threshold`` around the region ``channel > threshold``.

    With ``pad`` the grid gets a one-voxel border below the threshold so every
    surface closes; vertex coordinates stay in the unpadded index frame.
    """
    grid = np.asarray(channel, dtype=np.float64)
    if grid.ndim != 3:
        raise ShapeError(f"extract_mesh needs a 3-D grid, got shape {grid.shape}")
    if not np.any(grid > threshold):
        raise EmptySurfaceError(f"no voxel above threshold {threshold}")
    if pad:
        fill = min(grid.min(), threshold) - 1.0
        grid = np.pad(grid, 1, constant_values=fill)
    verts, faces = marching_cubes(grid, float(threshold))
    if len(faces) == 0:
        raise EmptySurfaceError(f"no surface crosses threshold {threshold}")
    if pad:
        verts = verts - 1.0
    return Mesh(verts, faces)


def write_obj(path, mesh):
    """ASCII ``v x y z`` / ``f i j k`` (1-based) mesh export."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(np.array(verts), np.array(faces))


# ---------------------------------------------------------------- descriptors


def eccentricity(mask):
    coords = np.argwhere(np.asarray(mask, dtype=bool)).astype(np.float64)
    if len(coords) < 2:
        return 0.0
    lam = np.linalg.eigvalsh(np.cov(coords.T, bias=True))
    if lam[-1] <= 0:
        return 0.0
    return float(np.sqrt(max(0.0, 1.0 - max(lam[0], 0.0) / lam[-1])))


def hull_volume(points):
    """Convex-hull volume, or ``None`` when the points are coplanar or too few."""
    try:
        return float(ConvexHull(points).volume)
    except (QhullError, ValueError):
        return None


def compute_descriptors(mask, mesh):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptySurfaceError("descriptor mask has no foreground voxel")
    if not mesh.is_closed():
        raise OpenMeshError("mesh is not closed (some edge is not shared by exactly two faces)")
    volume = mesh.signed_volume()
    area = mesh.surface_area()
    if volume <= 0 or area <= 0:
        raise OpenMeshError(f"mesh encloses non-positive volume {volume} (area {area})")
    sphericity = np.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0) / area
    v_hull = hull_volume(mesh.vertices)
    if v_hull is None or v_hull <= 0:
        log.warning("convex hull is degenerate; protrusivity set to 0")
        protrusivity = 0.0
    else:
        protrusivity = float(np.clip(1.0 - volume / v_hull, 0.0, 1.0))
    return DescriptorVector(volume, area, float(sphericity), eccentricity(mask), protrusivity)


def describe_channel(channel, threshold=None):
    """Otsu-threshold (unless given), mesh and describe one intensity channel."""
    channel = np.asarray(channel, dtype=np.float64)
    thr = otsu_threshold(channel) if threshold is None else float(threshold)
    mask = channel > thr
    return compute_descriptors(mask, extract_mesh(channel, thr))


def describe_volume(volume):
    """Descriptors for every channel of a :class:`~morphgen.volume.CellVolume`."""
    return [describe_channel(volume.data[c]) for c in range(volume.channels)]


def write_descriptor_csv(path, rows):
    """``rows`` is an iterable of (sample_id, channel_name, DescriptorVector)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DESCRIPTOR_HEADER)
        for sample_id, channel, d in rows:
            w.writerow([sample_id, channel] + [repr(float(v)) for v in d.as_array()])


def read_descriptor_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        (r["sample_id"], r["channel"], DescriptorVector(*(float(r[k]) for k in DescriptorVector.names())))
        for r in rows
    ]


# ---------------------------------------------------------------- ERK readout


def binary_dilation(mask, iterations=1):
    """Iterated 6-connected dilation; voxels beyond the grid are background."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    out = np.asarray(mask, dtype=bool).copy()
    for _ in range(iterations):
        grown = out.copy()
        for axis in range(out.ndim):
            lo = [slice(None)] * out.ndim
            hi = [slice(None)] * out.ndim
            lo[axis], hi[axis] = slice(None, -1), slice(1, None)
            grown[tuple(lo)] |= out[tuple(hi)]
            grown[tuple(hi)] |= out[tuple(lo)]
        out = grown
    return out


def erk_ratio(signal, nucleus_mask, dilate_iters=7):
    """Mean signal over the nucleus divided by mean signal over the surrounding ring."""
    signal = np.asarray(signal, dtype=np.float64)
    nuc = np.asarray(nucleus_mask, dtype=bool)
    if signal.shape != nuc.shape:
        raise ShapeError(f"signal {signal.shape} and mask {nuc.shape} differ")
    if not nuc.any():
        raise DegenerateInputError("nucleus mask is empty")
    ring = binary_dilation(nuc, dilate_iters) & ~nuc
    if not ring.any():
        raise DegenerateInputError("ring region is empty")
    ring_mean = _anchored_mean(signal[ring])
    if ring_mean == 0:
        raise DegenerateInputError("ring mean is zero; ratio undefined")
    return float(_anchored_mean(signal[nuc]) / ring_mean)


def _anchored_mean(values):
    # averaging offsets from the first value keeps constant regions exact
    ref = values[0]
    return ref + (values - ref).mean()
