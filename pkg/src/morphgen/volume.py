"""Cell volumes: the ``MVOL`` codec and preparation for modelling.

``MVOL`` layout (little endian)::

    b"MVOL" | u16 version | u8 channels | u32 D | u32 H | u32 W | u8 dtype | payload

dtype 0 is float32; the payload is channel-major, C order.
"""
import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, DegenerateInputError, TruncatedPayloadError, UnsupportedVersionError

MAGIC = b"MVOL"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHB3IB")

CYTOPLASM, NUCLEUS = 0, 1


@dataclass
class CellVolume:
    """A multi-channel 3D intensity grid, ``data`` shaped (C, D, H, W).

    Cell volumes carry two channels (cytoplasm, nucleus); single-channel
    volumes are used for synthesised signal channels.
    """

    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"CellVolume data must be (C, D, H, W), got shape {self.data.shape}")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def extents(self):
        return tuple(self.data.shape[1:])

    @property
    def cytoplasm(self):
        return self.data[CYTOPLASM]

    @property
    def nucleus(self):
        return self.data[NUCLEUS]


def encode_volume(vol):
    header = _HEADER.pack(MAGIC, VERSION, vol.channels, *vol.extents, DTYPE_F32)
    return header + vol.data.astype("<f4", copy=False).tobytes()


def decode_volume(buf):
    buf = bytes(buf)
    if buf[:4] != MAGIC:
        raise BadMagicError(f"not an MVOL stream: magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"MVOL header needs {_HEADER.size} bytes, got {len(buf)}")
    _, version, channels, d, h, w, dtype = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersionError(f"MVOL version {version} is not supported (expected {VERSION})")
    if dtype != DTYPE_F32:
        raise UnsupportedVersionError(f"MVOL dtype code {dtype} is not supported (only 0 = f32)")
    n = channels * d * h * w * 4
    payload = buf[_HEADER.size : _HEADER.size + n]
    if len(payload) != n:
        raise TruncatedPayloadError(f"MVOL payload has {len(payload)} bytes, header promises {n}")
    data = np.frombuffer(payload, dtype="<f4").reshape(channels, d, h, w)
    return CellVolume(data.astype(np.float32))


def volume_codec(direction, path_or_bytes, volume=None):
    """Read or write an ``MVOL`` volume.

    ``direction="read"`` accepts a path or a bytes object and returns a
    :class:`CellVolume`.  ``direction="write"`` serialises ``volume``; when
    ``path_or_bytes`` is a path the bytes are also written there.
    """
    if direction == "read":
        if isinstance(path_or_bytes, (bytes, bytearray, memoryview)):
            return decode_volume(path_or_bytes)
        with open(path_or_bytes, "rb") as fh:
            return decode_volume(fh.read())
    if direction == "write":
        raw = encode_volume(volume)
        if path_or_bytes is not None and not isinstance(path_or_bytes, (bytes, bytearray, io.BytesIO)):
            with open(path_or_bytes, "wb") as fh:
                fh.write(raw)
        return raw
    raise ValueError(f"direction must be 'read' or 'write', got {direction!r}")


def read_volume(path):
    return volume_codec("read", path)


def write_volume(path, vol):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    volume_codec("write", path, vol)


# ---------------------------------------------------------------- preprocessing


def _axis_weights(n_in, n_out):
    # half-voxel-centre alignment; scale 1 maps every voxel onto itself
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (src - lo).astype(np.float64)


def resize_trilinear(grid, shape):
    """Trilinear resample of a 3D array onto ``shape``; identity when shapes match."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape == tuple(shape):
        return grid.copy()
    out = grid
    for axis, n_out in enumerate(shape):
        lo, hi, t = _axis_weights(out.shape[axis], n_out)
        a = np.take(out, lo, axis=axis)
        b = np.take(out, hi, axis=axis)
        bshape = [1, 1, 1]
        bshape[axis] = n_out
        t = t.reshape(bshape)
        out = a * (1.0 - t) + b * t
    return out


def preprocess(raw, target_cube=64, on_constant="error"):
    """Resize isotropically so the longest axis is ``target_cube``, map each
    channel to [-1, 1] and pad with background (-1) to a centred cube.

    ``on_constant`` controls channels with zero dynamic range: ``"error"``
    raises :class:`DegenerateInputError`, ``"background"`` maps them to -1.
    """
    if on_constant not in ("error", "background"):
        raise ValueError(f"on_constant must be 'error' or 'background', got {on_constant!r}")
    data = np.asarray(raw.data, dtype=np.float64)
    if min(data.shape[1:]) < 1:
        raise ValueError(f"volume extents must be >= 1, got {data.shape[1:]}")
    if not np.isfinite(data).all():
        raise ValueError("volume contains non-finite values")
    ext = np.array(data.shape[1:])
    scale = target_cube / ext.max()
    new_ext = tuple(int(min(target_cube, max(1, round(n * scale)))) for n in ext)
    out = np.full((data.shape[0], target_cube, target_cube, target_cube), -1.0, dtype=np.float32)
    before = [(target_cube - n) // 2 for n in new_ext]
    region = tuple(slice(b, b + n) for b, n in zip(before, new_ext))
    for c in range(data.shape[0]):
        ch = resize_trilinear(data[c], new_ext)
        lo, hi = ch.min(), ch.max()
        if hi <= lo:
            if on_constant == "error":
                raise DegenerateInputError(f"channel {c} is constant ({lo}); nothing to normalise")
            continue
        if lo == -1.0 and hi == 1.0:
            # already normalised: keep the values bit for bit
            out[(c,) + region] = ch.astype(np.float32)
            continue
        out[(c,) + region] = (2.0 * (ch - lo) / (hi - lo) - 1.0).astype(np.float32)
    return CellVolume(out, raw.voxel_size)


def is_preprocessed(vol, cube, tol=1e-5):
    d = vol.data
    return vol.extents == (cube, cube, cube) and d.min() >= -1 - tol and d.max() <= 1 + tol
