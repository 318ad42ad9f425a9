"""Exception types shared across the package."""


class PatchregError(Exception):
    """Base class for all package errors."""


class Singular(PatchregError):
    """Affine matrix is not invertible."""


class DegenerateVolume(PatchregError):
    """Volume too small to define a canvas (any array dimension < 2)."""


class ParseError(PatchregError):
    """File could not be parsed as a volume."""


class UnsupportedDatatype(PatchregError):
    """Volume datatype outside the supported subset."""


class EmptyImage(PatchregError):
    """Image has no positive intensities to sample from."""


class ShapeMismatch(PatchregError):
    """Tensor or patch shapes do not agree."""


class NonFiniteLoss(PatchregError):
    """Training loss became NaN or infinite."""


class IncompatibleSchedule(PatchregError):
    """Model scale schedule cannot be applied to the given images."""


class EmptyOverlap(PatchregError):
    """Fixed and moving images share no world-space overlap."""
