"""Exception taxonomy shared across the package.

Every error raised by library code derives from MetaictalError so callers
can catch one base class; the CLI maps subclasses onto exit codes.
"""


class MetaictalError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfig(MetaictalError):
    """A configuration value violates its documented invariants."""


class InvalidEpisode(MetaictalError):
    """Episode fields are inconsistent (shape, onsets, duration)."""


class NonPositiveWindow(MetaictalError):
    """A window specification leaves no room inside the episode."""


class OutOfRange(MetaictalError):
    """A requested window exceeds the episode bounds."""


class MisalignedTime(MetaictalError):
    """A time does not fall on the sample grid; interpolation is refused."""


class UnknownEpisode(MetaictalError):
    """An episode id was referenced but is not present."""


class InsufficientData(MetaictalError):
    """An episode cannot supply the requested number of windows."""


class FormatError(MetaictalError):
    """A persisted artifact is corrupt or has an unsupported version."""


class IoError(MetaictalError):
    """Reading or writing a persisted artifact failed."""


class ShapeMismatch(MetaictalError):
    """Array arguments disagree with the configured shapes."""


class NonFinite(MetaictalError):
    """A NaN or Inf appeared where a finite value is required."""


class EmptySet(MetaictalError):
    """An operation received an empty collection it cannot act on."""


class EmptyTrace(MetaictalError):
    """An indicator trace has no samples (or no usable baseline)."""


class GridMismatch(MetaictalError):
    """Indicator traces do not share a common time grid."""


class ModeUnsupported(MetaictalError):
    """An unknown meta-gradient mode was requested."""


class MissingCheckpoint(MetaictalError):
    """A trained checkpoint required for evaluation is absent."""
