"""Exception types shared across the package, mapped to CLI exit codes."""


class FlowsynthError(Exception):
    """Base class for all errors raised by flowsynth."""

    exit_code = 2


class UsageError(FlowsynthError):
    """Bad flags, bad parameter combinations, invalid config values."""

    exit_code = 1


class DataError(FlowsynthError):
    """Malformed or missing input data: files, formats, schemas."""

    exit_code = 2


class DivergenceError(FlowsynthError):
    """Training loss went NaN or blew past the divergence guard."""

    exit_code = 3


class ConvergenceError(FlowsynthError):
    """An iterative fit (one-class SVM) failed its convergence check."""

    exit_code = 4


class AutodiffError(FlowsynthError):
    """Misuse of the backprop machinery (double backward, stale grads)."""

    exit_code = 2
