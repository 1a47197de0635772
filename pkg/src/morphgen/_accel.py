"""Numba switch for the hot kernels.

Every kernel in :mod:`morphgen.kernels` exists twice: a ``@njit`` loop and a
vectorised numpy version.  Set ``MORPHGEN_DISABLE_NUMBA=1`` before import to
force the numpy path everywhere (also used when numba is not installed).
"""
import os

DISABLE_ENV = "MORPHGEN_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
    uint64 = numba.uint64
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False
    uint64 = int

USE_NUMBA = HAVE_NUMBA and os.environ.get(DISABLE_ENV, "").strip().lower() not in ("1", "true", "yes")

njit_kwargs = {"cache": True, "nogil": True, "fastmath": False}


def njit(func):
    """Compile ``func`` with numba when available; return it untouched otherwise."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(**njit_kwargs)(func)


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
