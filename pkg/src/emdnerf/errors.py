"""Exception hierarchy shared by the library and the CLI."""


class EmdNerfError(Exception):
    """Base class for all library errors."""


class InputError(EmdNerfError, ValueError):
    """Arguments violate an operation's preconditions."""


class ConvergenceError(EmdNerfError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, violation=None, iterations=None):
        super().__init__(message)
        self.violation = violation
        self.iterations = iterations


class NumericalError(EmdNerfError, RuntimeError):
    """Non-finite values appeared during a forward or backward pass."""


class DivergenceError(EmdNerfError, RuntimeError):
    """Training loss blew up; carries the last finite state."""

    def __init__(self, message, step=None, checkpoint_path=None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


class GenerationError(EmdNerfError, RuntimeError):
    """Synthetic scene or prior generation failed."""


class ConfigError(EmdNerfError, ValueError):
    """Invalid or incomplete configuration."""


class DataError(EmdNerfError, IOError):
    """Missing or malformed on-disk data."""


class ChecksumError(DataError):
    """A checkpoint payload does not match its recorded checksum."""
