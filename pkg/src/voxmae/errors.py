"""Exception taxonomy shared across the package."""

__all__ = [
    "VoxmaeError",
    "ParseError",
    "ShortBufferError",
    "BadMagicError",
    "UnsupportedDatatypeError",
    "BadDimsError",
    "NonFiniteDataError",
    "SizeMismatchError",
    "DegenerateVolumeError",
    "TooFewFramesError",
    "NotDivisibleError",
    "GridMismatchError",
    "OutOfBoundsError",
    "BadDimError",
    "LengthMismatchError",
    "EmptyInputError",
    "CountMismatchError",
    "ShapeMismatchError",
    "BadSpecError",
]


class VoxmaeError(Exception):
    """Base class for all package-specific failures."""


class ParseError(VoxmaeError):
    """A binary or sidecar payload could not be decoded."""


class ShortBufferError(ParseError):
    """Header buffer is shorter than the fixed header size."""


class BadMagicError(ParseError):
    """File magic bytes are not one of the accepted values."""


class UnsupportedDatatypeError(ParseError):
    """Header datatype code outside the supported subset."""


class BadDimsError(ParseError):
    """Header dimension counts are out of range."""


class NonFiniteDataError(VoxmaeError):
    """Loaded payload contains NaN or Inf values."""


class SizeMismatchError(VoxmaeError):
    """Payload length disagrees with the declared dimensions."""


class DegenerateVolumeError(VoxmaeError):
    """Operation undefined on a constant (zero-variance) volume."""


class TooFewFramesError(VoxmaeError):
    """Temporal operation requires at least two frames."""


class NotDivisibleError(VoxmaeError):
    """Spatial dims are not a multiple of the requested patch edge."""


class GridMismatchError(VoxmaeError):
    """Complexity grid and foreground grid shapes disagree."""


class OutOfBoundsError(VoxmaeError):
    """Token extent reaches outside the volume."""


class BadDimError(VoxmaeError):
    """Embedding dimension unsupported by the positional encoding."""


class LengthMismatchError(VoxmaeError):
    """Flat voxel vector length disagrees with the token scale."""


class EmptyInputError(VoxmaeError):
    """Encoder called with zero visible tokens."""


class CountMismatchError(VoxmaeError):
    """Latent count disagrees with the mask plan's visible count."""


class ShapeMismatchError(VoxmaeError):
    """Array shapes incompatible with the operation."""


class BadSpecError(VoxmaeError):
    """Phantom or config specification violates its invariants."""
