"""
Exceptions shared by all modules, plus the mapping from exception to CLI exit code.
"""


class GlideError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(GlideError, ValueError):
    """Run configuration failed validation or is inconsistent."""


class InvalidRangeError(GlideError, ValueError):
    """A numeric argument lies outside its admissible range."""


class ShapeMismatchError(GlideError, ValueError):
    """Array shapes of the inputs do not agree."""


class EmptyPocketError(GlideError, ValueError):
    """A pocket with zero atoms was given where atoms are required."""


class EmptyHistogramError(GlideError, ValueError):
    """A histogram has no mass, so it cannot be normalized."""


class CheckpointMismatchError(GlideError, ValueError):
    """A checkpoint does not match the expected layout, config or content hash."""


class NonFiniteError(GlideError, ArithmeticError):
    """
    A NaN or infinity showed up in a computation.

    Parameters
    ----------
    message : str
        Human readable description.
    step : int or None
        Diffusion step at which the value appeared.
    layer : int or None
        Network layer index at which the value appeared.
    """

    def __init__(self, message, step=None, layer=None):
        super().__init__(message)
        self.step = step
        self.layer = layer


class DivergenceError(NonFiniteError):
    """Training loss became non-finite."""


class DegenerateDistributionError(GlideError, ArithmeticError):
    """Unnormalized probabilities summed to zero."""


# exit codes of the command line interface
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def exit_code_for(exc):
    """
    Map an exception to the CLI exit code.

    Parameters
    ----------
    exc : BaseException
        The exception that terminated a command.

    Returns
    -------
    int
        2 for configuration problems, 3 for I/O problems, 4 for numerical aborts.
    """

    if isinstance(exc, ArithmeticError):
        return EXIT_NUMERICAL
    if isinstance(exc, (OSError, CheckpointMismatchError)):
        return EXIT_IO
    return EXIT_CONFIG


def error_kind(exc):
    """Short machine readable name used in the error JSON."""

    if isinstance(exc, CheckpointMismatchError):
        return "checkpoint-mismatch"
    if isinstance(exc, FileNotFoundError):
        return "missing-file"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, ArithmeticError):
        return "numerical-abort"
    return "config-validation"
