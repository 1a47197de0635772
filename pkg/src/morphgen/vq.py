"""Per-channel codebooks, nearest-prototype quantisation and the VQ losses."""
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, ops
from .autodiff.nn import Module
from .errors import ShapeError


class Codebook(Module):
    """K prototype vectors of length n_z plus usage bookkeeping."""

    def __init__(self, size=1024, dim=16, rng=None, name="codebook"):
        rng = rng or np.random.default_rng(0)
        self.entries = Parameter(rng.uniform(-1.0 / size, 1.0 / size, (size, dim)).astype(np.float32), name=name)
        self.usage_counts = np.zeros(size, dtype=np.int64)
        self.idle_steps = np.zeros(size, dtype=np.int64)
        self.initialised = False
        # EMA statistics, used only when codebook updates run in "ema" mode
        self.ema_count = np.zeros(size, dtype=np.float64)
        self.ema_sum = np.zeros((size, dim), dtype=np.float64)

    @property
    def size(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]

    def reset_usage(self):
        self.usage_counts[:] = 0

    def init_from(self, rows, rng, noise=1e-3):
        """Seed every entry from randomly chosen encoder outputs."""
        rows = np.asarray(rows, dtype=np.float64)
        pick = rng.integers(0, len(rows), size=self.size)
        jitter = noise * rng.standard_normal((self.size, self.dim))
        self.entries.data = (rows[pick] + jitter).astype(self.entries.dtype)
        self.ema_sum[:] = self.entries.data
        self.ema_count[:] = 1.0
        self.initialised = True

    def mark_step(self, indices):
        """Advance idle counters after one training step that used ``indices``."""
        used = np.zeros(self.size, dtype=bool)
        used[np.asarray(indices).ravel()] = True
        self.idle_steps += 1
        self.idle_steps[used] = 0

    def revive_dead(self, rows, rng, dead_after=1000):
        """Re-seed entries idle for ``dead_after`` steps from current encoder outputs."""
        dead = np.flatnonzero(self.idle_steps >= dead_after)
        if dead.size:
            rows = np.asarray(rows)
            self.entries.data[dead] = rows[rng.integers(0, len(rows), size=dead.size)]
            self.ema_sum[dead] = self.entries.data[dead]
            self.ema_count[dead] = 1.0
            self.idle_steps[dead] = 0
        return dead.size

    def ema_update(self, rows, indices, decay=0.99, eps=1e-5):
        rows = np.asarray(rows, dtype=np.float64)
        onehot_count = np.bincount(indices, minlength=self.size).astype(np.float64)
        sums = np.zeros_like(self.ema_sum)
        np.add.at(sums, indices, rows)
        self.ema_count = decay * self.ema_count + (1 - decay) * onehot_count
        self.ema_sum = decay * self.ema_sum + (1 - decay) * sums
        n = self.ema_count.sum()
        count = (self.ema_count + eps) / (n + self.size * eps) * n
        self.entries.data = (self.ema_sum / count[:, None]).astype(self.entries.dtype)


@dataclass
class CodebookLibrary:
    """Independent codebooks for the cytoplasm and nucleus channels."""

    cytoplasm: Codebook
    nucleus: Codebook

    @classmethod
    def create(cls, size=1024, dim=16, seed=0):
        ss = np.random.SeedSequence(seed).spawn(2)
        return cls(
            Codebook(size, dim, np.random.default_rng(ss[0]), name="codebook.cytoplasm"),
            Codebook(size, dim, np.random.default_rng(ss[1]), name="codebook.nucleus"),
        )

    def __iter__(self):
        return iter((self.cytoplasm, self.nucleus))


@dataclass
class QuantizeResult:
    indices: np.ndarray
    quantized: Tensor  # straight-through: values of the entries, gradient to the latent
    selected: Tensor  # gathered entries, gradient to the codebook
    distances: np.ndarray


def squared_distances(rows, entries):
    """``|a|^2 - 2 a.b + |b|^2`` for every row/entry pair (float32)."""
    rows = np.asarray(rows, dtype=np.float32)
    entries = np.asarray(entries, dtype=np.float32)
    d = (rows * rows).sum(1)[:, None] - 2.0 * (rows @ entries.T) + (entries * entries).sum(1)[None, :]
    return np.maximum(d, 0.0)


def nearest_entries(rows, entries, margin=1e-5):
    """Index of the nearest entry per row, ties going to the lowest index.

    The expansion picks candidates; any row whose runner-up lies within a
    rounding margin of the best is re-resolved with exact float64 differences.
    """
    rows = np.asarray(rows)
    entries = np.asarray(entries)
    d = squared_distances(rows, entries)
    best = d.argmin(axis=1)
    dmin = d[np.arange(len(d)), best]
    scale = (rows.astype(np.float64) ** 2).sum(1) + (entries.astype(np.float64) ** 2).sum(1).max() + 1.0
    close = (d <= (dmin + margin * scale)[:, None]).sum(axis=1) > 1
    todo = np.flatnonzero(close)
    e64 = entries.astype(np.float64)
    for start in range(0, todo.size, 64):
        sel = todo[start : start + 64]
        diff = rows[sel].astype(np.float64)[:, None, :] - e64[None, :, :]
        best[sel] = np.argmin((diff * diff).sum(-1), axis=1)
    return best


def quantize(latent, book, count=True):
    """Map each row of ``latent`` (positions x n_z) to its nearest codebook entry."""
    z = latent if isinstance(latent, Tensor) else Tensor(np.asarray(latent, dtype=np.float32))
    if z.ndim != 2 or z.shape[1] != book.dim:
        raise ShapeError(f"quantize: latent rows have shape {z.shape}, codebook entries have length {book.dim}")
    idx = nearest_entries(z.data, book.entries.data)
    values = book.entries.data[idx]
    dist = np.sqrt(((z.data.astype(np.float64) - values) ** 2).sum(1))
    if count:
        book.usage_counts += np.bincount(idx, minlength=book.size)
    return QuantizeResult(idx, ops.straight_through(z, values), ops.take_rows(book.entries, idx), dist)


def vq_losses(encoder_out, quantized, commitment_weight=0.25, codebook_weight=1.0):
    """Commitment and codebook losses averaged over channels.

    ``encoder_out`` and ``quantized`` are sequences of per-channel (positions x
    n_z) tensors; ``quantized`` must carry a gradient path to the codebook
    (``QuantizeResult.selected``).  Each channel term is the squared Euclidean
    distance averaged over positions.  The commitment term stops the gradient
    into the codebook, the codebook term stops it into the encoder.
    """
    if isinstance(encoder_out, Tensor):
        encoder_out, quantized = [encoder_out], [quantized]
    if len(encoder_out) != len(quantized):
        raise ShapeError("vq_losses: need one quantized tensor per encoder channel")
    comm, book = [], []
    for z, q in zip(encoder_out, quantized):
        if z.shape != q.shape:
            raise ShapeError(f"vq_losses: encoder output {z.shape} vs quantized {q.shape}")
        n_z = z.shape[-1]
        comm.append(ops.mul(ops.mse(z, q.detach()), float(n_z)))
        book.append(ops.mul(ops.mse(q, z.detach()), float(n_z)))
    w = 1.0 / len(comm)
    commitment = ops.mul(_total(comm), commitment_weight * w)
    codebook = ops.mul(_total(book), codebook_weight * w)
    return {"commitment_loss": commitment, "codebook_loss": codebook}


def _total(terms):
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return out
