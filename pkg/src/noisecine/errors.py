"""Exception types shared across the engine.

Grouped into a small hierarchy so the CLI can map whole classes of failures
to distinct exit codes.
"""


class NoiseCineError(Exception):
    """Base class for all engine errors."""


class InvalidShapeError(NoiseCineError):
    """A field, mask, or profile has the wrong shape or an empty extent."""


class LatentFormatError(NoiseCineError):
    """Base class for latent dump decode failures."""


class MagicError(LatentFormatError):
    """The file does not start with the latent dump magic bytes."""


class VersionError(LatentFormatError):
    """The latent dump declares an unsupported format version."""


class TruncatedError(LatentFormatError):
    """The latent dump payload is shorter than its header claims."""


class MissingReservoirError(NoiseCineError):
    """A non-wrapping lattice shift was requested without a reservoir field."""


class BoundsError(NoiseCineError):
    """A displaced mosaic piece leaves the grid with wrap disabled."""


class DegenerateChannelError(NoiseCineError):
    """A channel's spread is too small to rescale to a target std."""


class DegenerateSliceError(NoiseCineError):
    """An X-T slice has no usable edge content in any time row."""


class SingularityError(NoiseCineError):
    """The color-map regression design matrix is rank deficient."""


class DeterminismError(NoiseCineError):
    """A backend produced different outputs for identical requests."""


class TransportError(NoiseCineError):
    """The backend process or connection failed."""


class ProtocolError(TransportError):
    """The backend sent a malformed or mismatched wire message."""


class AlignmentError(NoiseCineError):
    """A window offset does not land on the latent grid."""


class ConfigError(NoiseCineError):
    """A scene config failed validation; the message names the offending key."""
