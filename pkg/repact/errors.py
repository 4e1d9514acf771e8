"""Exception types shared across the package.

The command line maps these onto its exit codes: validation problems exit 1,
I/O problems exit 2, numeric failures exit 3.
"""


class RepActError(Exception):
    """Base class for every error raised on purpose by this package."""


class ValidationError(RepActError, ValueError):
    """An argument or precondition was violated."""


class ConfigError(ValidationError):
    """The experiment configuration is malformed."""


class CheckpointError(RepActError):
    """A checkpoint or fused-model document could not be read or written."""


class DatasetFormatError(RepActError):
    """A dataset file does not match its binary layout."""

    def __init__(self, message, path=None, offset=0):
        self.path = path
        self.offset = offset
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte {offset})")


class NumericError(RepActError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, step=None):
        self.epoch = epoch
        self.step = step
        super().__init__(f"{message} (epoch {epoch}, step {step})")


class VerificationError(RepActError):
    """An equivalence or gradient check exceeded its tolerance."""
