"""Binary parameter (``MFWT``) and optimiser-state (``MFOS``) files.

MFWT: magic, u16 version, then until EOF one record per array:
u16 name length, UTF-8 name, u8 rank, rank x u32 extents, float32 LE payload.

MFOS: magic, u16 version, then per parameter: u16 name length, name,
u32 Adam step, u8 rank, extents, first-moment payload, second-moment payload.
"""
import struct

import numpy as np

from ..errors import BadMagicError, CheckpointError, TruncatedPayloadError, UnsupportedVersionError

WEIGHTS_MAGIC = b"MFWT"
OPTIM_MAGIC = b"MFOS"
VERSION = 1


def _pack_header(name, shape):
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def _payload(arr):
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def weights_to_bytes(arrays):
    """Serialise an ordered mapping ``name -> array``."""
    out = [WEIGHTS_MAGIC, struct.pack("<H", VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        out.append(_pack_header(name, arr.shape))
        out.append(_payload(arr))
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(f"stream ends at byte {len(self.buf)}, needed {self.pos + n}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self):
        return self.pos >= len(self.buf)

    def header(self):
        (n,) = self.unpack("<H")
        name = bytes(self.take(n)).decode("utf-8")
        (rank,) = self.unpack("<B")
        shape = self.unpack(f"<{rank}I") if rank else ()
        return name, tuple(shape)

    def array(self, shape):
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)


def _open(buf, magic):
    r = _Reader(buf)
    got = bytes(r.take(4)) if len(buf) >= 4 else bytes(buf)
    if got != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {got!r}")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise UnsupportedVersionError(f"{magic.decode()} version {version} not supported (expected {VERSION})")
    return r


def weights_from_bytes(buf):
    r = _open(buf, WEIGHTS_MAGIC)
    out = {}
    while not r.done():
        name, shape = r.header()
        out[name] = r.array(shape)
    return out


def optim_to_bytes(named_params):
    out = [OPTIM_MAGIC, struct.pack("<H", VERSION)]
    for name, p in named_params:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", p.adam.step))
        out.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.append(_payload(p.adam.m))
        out.append(_payload(p.adam.v))
    return b"".join(out)


def optim_from_bytes(buf):
    r = _open(buf, OPTIM_MAGIC)
    out = {}
    while not r.done():
        (n,) = r.unpack("<H")
        name = bytes(r.take(n)).decode("utf-8")
        (step,) = r.unpack("<I")
        (rank,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{rank}I")) if rank else ()
        out[name] = (step, r.array(shape), r.array(shape))
    return out


def save_weights(path, arrays):
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(arrays))


def load_weights(path):
    try:
        with open(path, "rb") as fh:
            return weights_from_bytes(fh.read())
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None


def save_optimizer(path, named_params):
    with open(path, "wb") as fh:
        fh.write(optim_to_bytes(named_params))


def load_optimizer(path, named_params):
    with open(path, "rb") as fh:
        state = optim_from_bytes(fh.read())
    for name, p in named_params:
        if name in state:
            step, m, v = state[name]
            p.adam.step = step
            p.adam.m = m.astype(p.data.dtype)
            p.adam.v = v.astype(p.data.dtype)
