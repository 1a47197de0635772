"""Embedding extraction and evaluation metrics for generated cell populations."""
import csv
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import CheckpointError, DegenerateInputError, MorphgenError, ShapeError
from .volume import CellVolume

REPORT_HEADER = ["metric", "value", "param_k", "n_real", "n_gen", "seed"]


class MetricError(MorphgenError, ValueError):
    pass


@dataclass
class EmbeddingSet:
    rows: np.ndarray
    labels: list = None
    plates: list = None
    sample_ids: list = None

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        n = len(self.rows)
        if not np.isfinite(self.rows).all():
            raise ShapeError("embedding rows contain non-finite values")
        self.labels = list(self.labels) if self.labels is not None else [""] * n
        self.plates = list(self.plates) if self.plates is not None else [""] * n
        self.sample_ids = list(self.sample_ids) if self.sample_ids is not None else [str(i) for i in range(n)]
        if not (len(self.labels) == len(self.plates) == len(self.sample_ids) == n):
            raise ShapeError("labels, plates and sample ids must have one entry per row")

    def __len__(self):
        return len(self.rows)

    @property
    def dim(self):
        return self.rows.shape[1]


@dataclass
class MetricReport:
    metric: str
    value: float
    params: dict = field(default_factory=dict)
    timestamp: float = field(default_factory=time.time)
    reason: str = ""

    def __post_init__(self):
        if not np.isfinite(self.value) and not self.reason:
            raise MetricError(f"{self.metric} is not finite and no reason was given")

    def csv_row(self):
        p = self.params
        return [self.metric, repr(float(self.value)), p.get("k", ""), p.get("n_real", ""), p.get("n_gen", ""), p.get("seed", "")]


def write_reports(path, reports):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


# ---------------------------------------------------------------- embeddings


def embed(volumes, model, pooling="mean", batch=16):
    """Pool each channel's encoder latents over space and concatenate the channels.

    ``volumes`` is a CellVolume or an (N, C, D, H, W) batch; returns a vector
    of length C * n_z or an (N, C * n_z) matrix respectively.
    """
    if model is None:
        raise CheckpointError("embedding needs a loaded stage-1 checkpoint")
    if pooling not in ("mean", "max"):
        raise ValueError(f"pooling must be 'mean' or 'max', got {pooling!r}")
    single = isinstance(volumes, CellVolume)
    x = volumes.data[None] if single else np.asarray(volumes, dtype=np.float32)
    out = []
    for i in range(0, len(x), batch):
        z = model.encode_batch(x[i : i + batch]).data.astype(np.float64)  # (N, C, n_z, d, h, w)
        pooled = z.mean(axis=(3, 4, 5)) if pooling == "mean" else z.max(axis=(3, 4, 5))
        out.append(pooled.reshape(len(z), -1))
    rows = np.concatenate(out) if out else np.zeros((0, model.config.channels * model.config.n_z))
    return rows[0] if single else rows


def write_embeddings(path, emb):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "plate"] + [f"f_{i}" for i in range(emb.dim)])
        for sid, lab, pl, row in zip(emb.sample_ids, emb.labels, emb.plates, emb.rows):
            w.writerow([sid, lab, pl] + [repr(float(v)) for v in row])


def read_embeddings(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["sample_id", "label", "plate"]:
            raise ShapeError(f"{path}: embeddings CSV must start with sample_id,label,plate")
        sids, labels, plates, rows = [], [], [], []
        for rec in reader:
            if len(rec) != len(header):
                raise ShapeError(f"{path}: row {len(rows) + 1} has {len(rec)} fields, expected {len(header)}")
            sids.append(rec[0])
            labels.append(rec[1])
            plates.append(rec[2])
            rows.append([float(v) for v in rec[3:]])
    return EmbeddingSet(np.array(rows).reshape(len(rows), len(header) - 3), labels, plates, sids)


# ---------------------------------------------------------------- FID


def moments(rows):
    rows = np.asarray(rows.rows if isinstance(rows, EmbeddingSet) else rows, dtype=np.float64)
    if rows.ndim != 2 or len(rows) < 2:
        raise MetricError("need at least two embedding rows to estimate moments")
    return rows.mean(axis=0), np.atleast_2d(np.cov(rows, rowvar=False))


def _as_moments(x):
    if isinstance(x, tuple) and len(x) == 2:
        mu, cov = x
        mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        return mu, np.atleast_2d(np.asarray(cov, dtype=np.float64))
    return moments(x)


def _psd_sqrt_eigs(mat, what):
    lam, vec = np.linalg.eigh((mat + mat.T) / 2.0)
    tol = max(1e-8, 1e-8 * float(np.abs(lam).max(initial=0.0)))
    if lam.min(initial=0.0) < -tol:
        raise MetricError(f"{what} is not positive semi-definite (eigenvalue {lam.min():.3g})")
    return np.clip(lam, 0.0, None), vec


def fid(real, gen):
    """Frechet distance between Gaussian fits (or exact ``(mean, cov)`` moments)."""
    mu_r, c_r = _as_moments(real)
    mu_g, c_g = _as_moments(gen)
    if mu_r.shape != mu_g.shape or c_r.shape != c_g.shape or c_r.shape != (len(mu_r), len(mu_r)):
        raise ShapeError(f"FID dimension mismatch: {mu_r.shape}/{c_r.shape} vs {mu_g.shape}/{c_g.shape}")
    if np.array_equal(mu_r, mu_g) and np.array_equal(c_r, c_g):
        return 0.0
    lam_r, vec_r = _psd_sqrt_eigs(c_r, "real covariance")
    sqrt_r = (vec_r * np.sqrt(lam_r)) @ vec_r.T
    mid = sqrt_r @ c_g @ sqrt_r
    lam_m, _ = _psd_sqrt_eigs(mid, "covariance product")
    diff = mu_r - mu_g
    value = float(diff @ diff + np.trace(c_r) + np.trace(c_g) - 2.0 * np.sqrt(lam_m).sum())
    return max(value, 0.0)


# ---------------------------------------------------------------- precision / recall / coverage


def _kth_radii(points, k):
    d = cdist(points, points)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def prf_coverage(real, gen, k=3):
    """k-NN support precision, recall, their F1, and coverage."""
    r = np.asarray(real.rows if isinstance(real, EmbeddingSet) else real, dtype=np.float64)
    g = np.asarray(gen.rows if isinstance(gen, EmbeddingSet) else gen, dtype=np.float64)
    if r.ndim != 2 or g.ndim != 2 or r.shape[1] != g.shape[1]:
        raise ShapeError(f"prf_coverage: real {r.shape} and gen {g.shape} must be 2-D with equal width")
    if k < 1 or len(r) < k + 1 or len(g) < k + 1:
        raise MetricError(f"need at least k+1 = {k + 1} points in each set (k >= 1)")
    rad_r = _kth_radii(r, k)
    rad_g = _kth_radii(g, k)
    d_rg = cdist(r, g)  # real x gen
    precision = float(np.mean((d_rg <= rad_r[:, None]).any(axis=0)))
    recall = float(np.mean((d_rg <= rad_g[None, :]).any(axis=1)))
    coverage = float(np.mean(d_rg.min(axis=1) <= rad_r))
    f1 = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1, "coverage": coverage}


# ---------------------------------------------------------------- rank statistics


def concordance_index(truth, predicted, negate_predicted=False):
    """Harrell's C over strictly ordered truth pairs; tied predictions score one half."""
    y = np.asarray(truth, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if len(y) != len(p) or len(y) < 2:
        raise MetricError("concordance_index needs equal-length inputs of length >= 2")
    if negate_predicted:
        p = -p
    iu = np.triu_indices(len(y), k=1)
    dy = np.sign(y[iu[0]] - y[iu[1]])
    dp = np.sign(p[iu[0]] - p[iu[1]])
    usable = dy != 0
    n = int(usable.sum())
    if n == 0:
        raise MetricError("all truth values are tied; concordance undefined")
    score = np.where(dp[usable] == 0, 0.5, (dp[usable] == dy[usable]).astype(np.float64))
    return float(score.sum() / n)


def kolmogorov_sf(lam):
    """Survival function of the Kolmogorov distribution, P(K > lam)."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # Jacobi theta form converges fast for small arguments
        s = sum(math.exp(-((2 * j - 1) ** 2) * math.pi**2 / (8 * lam * lam)) for j in range(1, 8))
        return float(min(1.0, max(0.0, 1.0 - math.sqrt(2 * math.pi) / lam * s)))
    s = sum((-1) ** (j - 1) * math.exp(-2 * j * j * lam * lam) for j in range(1, 101))
    return float(min(1.0, max(0.0, 2.0 * s)))


def ks_two_sample(a, b):
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise MetricError("ks_two_sample needs two non-empty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    stat = float(np.abs(cdf_a - cdf_b).max())
    en = math.sqrt(a.size * b.size / (a.size + b.size))
    return {"statistic": stat, "p_value": kolmogorov_sf(en * stat)}


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) != len(b) or len(a) < 2:
        raise MetricError("pearson needs equal-length inputs of length >= 2")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(da @ da), math.sqrt(db @ db)
    if sa == 0 or sb == 0:
        raise DegenerateInputError("pearson correlation undefined for a constant input")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def zscore(values, groups=None):
    """Z-normalise group means against the mean and population std of all group means.

    Accepts a mapping ``{group: values}`` or flat ``values`` with a parallel
    ``groups`` sequence.  Returns ``{group: z}`` in first-seen group order.
    """
    if groups is not None:
        grouped = {}
        for v, g in zip(np.asarray(values, dtype=np.float64).ravel(), groups):
            grouped.setdefault(g, []).append(v)
    else:
        grouped = dict(values)
    if len(grouped) < 2:
        raise MetricError("zscore needs at least two groups")
    names = list(grouped)
    means = np.array([np.mean(grouped[g]) for g in names])
    sd = means.std()
    if not sd > 0:
        raise DegenerateInputError("all group means are equal; z-scores undefined")
    return {g: float(z) for g, z in zip(names, (means - means.mean()) / sd)}


# ---------------------------------------------------------------- EFAAR


def _normalise_block(rows, ctrl, mode):
    c = rows[ctrl]
    mu = c.mean(axis=0)
    if mode == "center_scale":
        sd = c.std(axis=0)
        if np.any(sd <= 0):
            raise DegenerateInputError("a feature has zero variance across controls")
        return (rows - mu) / sd
    if len(c) <= rows.shape[1]:
        raise DegenerateInputError(f"typical variance normalisation needs more than {rows.shape[1]} controls, got {len(c)}")
    cov = np.cov(c, rowvar=False, bias=True)
    lam, vec = np.linalg.eigh(cov)
    if lam.min() <= 1e-12 * max(lam.max(), 1e-300):
        raise DegenerateInputError("control covariance is singular")
    return ((rows - mu) @ vec) / np.sqrt(lam)


def efaar_normalize(emb, controls_label, mode="center_scale"):
    """Normalise every row against the controls (per plate when plates differ)."""
    if mode not in ("center_scale", "tvn"):
        raise ValueError(f"mode must be 'center_scale' or 'tvn', got {mode!r}")
    labels = np.asarray(emb.labels, dtype=object)
    plates = np.asarray(emb.plates, dtype=object)
    ctrl = labels == controls_label
    if not ctrl.any():
        raise MetricError(f"no control rows labelled {controls_label!r}")
    out = np.empty_like(emb.rows)
    for plate in dict.fromkeys(plates):
        sel = plates == plate
        if not (ctrl & sel).any():
            raise MetricError(f"plate {plate!r} has no control rows")
        out[sel] = _normalise_block(emb.rows[sel], ctrl[sel], mode)
    return out


def efaar_normalize_aggregate(emb, controls_label, mode="center_scale"):
    """Normalise to controls, then mean-aggregate per perturbation.

    Returns ``(labels, vectors)`` over the non-control labels in sorted order.
    """
    normed = efaar_normalize(emb, controls_label, mode)
    labels = np.asarray(emb.labels, dtype=object)
    names = sorted(set(emb.labels) - {controls_label})
    return names, np.array([normed[labels == n].mean(axis=0) for n in names]).reshape(len(names), emb.dim)


def read_known_pairs(path):
    pairs = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].rstrip("\n")
            if not line.strip():
                continue
            parts = [p.strip() for p in line.split("\t") if p.strip()]
            if len(parts) != 2:
                raise ShapeError(f"{path}:{n}: expected two tab-separated labels")
            pairs.append(tuple(parts))
    return pairs


def cosine_pairs(vectors):
    """Cosine similarity of every unordered pair (i < j), with the index arrays."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("zero vector has no cosine similarity")
    u = v / norms[:, None]
    i, j = np.triu_indices(len(v), k=1)
    return (u[i] * u[j]).sum(axis=1), i, j


def relationship_recall(labels, vectors, known_pairs, fraction=0.05):
    """Share of known pairs among the most and least similar ``fraction`` of all pairs."""
    if isinstance(known_pairs, (str, os.PathLike)):
        known_pairs = read_known_pairs(known_pairs)
    labels = list(labels)
    if len(labels) < 3:
        raise MetricError("relationship_recall needs at least three perturbations")
    if len(set(labels)) != len(labels):
        raise MetricError("aggregated labels must be unique")
    index = {l: n for n, l in enumerate(labels)}
    known = set()
    for a, b in known_pairs:
        if a not in index or b not in index:
            raise MetricError(f"known pair ({a}, {b}) references a label without an embedding")
        if a != b:
            known.add(frozenset((a, b)))
    if not known:
        raise MetricError("no known pairs to recall")
    sims, i, j = cosine_pairs(vectors)
    n_sel = max(1, int(math.floor(fraction * len(sims))))
    order = np.argsort(sims, kind="stable")
    chosen = np.union1d(order[:n_sel], order[-n_sel:])
    selected = {frozenset((labels[i[c]], labels[j[c]])) for c in chosen}
    return len(known & selected) / len(known)
