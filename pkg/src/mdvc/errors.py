"""Exception types shared across the package.

Every failure the library raises on purpose derives from MdvcError so
callers (and the CLI) can catch one base class.
"""


class MdvcError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MdvcError):
    """Operands have incompatible shapes; the message names both."""


class IndexLookupError(MdvcError):
    """An integer index fell outside the table it addresses."""


class MaskError(MdvcError):
    """A mask left some reduction slice with no admissible entry."""


class ParamError(MdvcError):
    """A scalar argument was outside its legal range."""


class GradError(MdvcError):
    """Misuse of the autodiff tape (non-scalar loss, stale grads, reuse)."""


class NumericError(MdvcError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ConfigError(MdvcError):
    """A configuration object failed validation."""


class FusionError(MdvcError):
    """Modality outputs disagreed with what the generator expects."""


class AlignmentError(MdvcError):
    """Two confidence streams do not share a grid."""


class DataError(MdvcError):
    """Malformed or out-of-range data (files, manifests, intervals)."""


class CheckpointError(MdvcError):
    """A checkpoint file is truncated, corrupt, or mismatched."""
