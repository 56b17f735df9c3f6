"""Exception hierarchy shared by all fibertrack modules.

The CLI maps these onto exit codes: configuration/data problems exit with
2, numerical failures with 3.
"""


class FibertrackError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 2


class ConfigurationError(FibertrackError, ValueError):
    """Invalid parameters, shapes or geometry that cannot be satisfied."""


class DataError(FibertrackError, ValueError):
    """Malformed or inconsistent input data (files, tables, volumes)."""


class DomainError(FibertrackError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class NumericalError(FibertrackError, ArithmeticError):
    """A numerical procedure failed (rank deficiency, non-convergence)."""

    exit_code = 3


class FitError(NumericalError):
    """Tensor estimation failed."""


class DegenerateModelError(NumericalError):
    """The voxel model is degenerate (e.g. zero noise level)."""


class GradientUndefinedError(NumericalError):
    """The atan2 loss gradient is undefined for (anti)parallel inputs."""


class DeadEndError(NumericalError):
    """The posterior carries no mass in the forward hemisphere."""


class SeedRejectedError(FibertrackError):
    """A seed voxel is outside the volume or below the anisotropy threshold."""


class SkipSample(FibertrackError):
    """A patch cannot be extracted at this voxel (too close to the boundary)."""
