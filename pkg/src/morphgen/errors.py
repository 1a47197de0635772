"""Exception types shared across the package.

The CLI maps :class:`NumericAbort` to exit code 3 and every other
:class:`MorphgenError` to exit code 2.
"""


class MorphgenError(Exception):
    """Base class for data and validation failures."""


class ShapeError(MorphgenError, ValueError):
    pass


class NonFiniteError(MorphgenError, ValueError):
    pass


class TapeError(MorphgenError, RuntimeError):
    pass


class NumericAbort(MorphgenError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class VolumeFormatError(MorphgenError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class UnsupportedVersionError(VolumeFormatError):
    pass


class DegenerateInputError(MorphgenError, ValueError):
    pass


class EmptySurfaceError(MorphgenError, ValueError):
    pass


class OpenMeshError(MorphgenError, ValueError):
    pass


class CheckpointError(MorphgenError):
    pass


class ConfigError(MorphgenError, ValueError):
    pass
