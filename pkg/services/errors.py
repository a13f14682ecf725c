"""Exceptions raised by the lab services.

Every error the CLI maps to an exit code derives from LabError:
- ConfigError -> exit 1
- anything else -> exit 2
"""


class LabError(Exception):
    """Base class for all lab failures."""


class InvalidParameterError(LabError, ValueError):
    """A parameter is non-finite or outside its admissible range."""


class KernelSingularityError(LabError):
    """A kernel returned a non-finite value at a sample point."""

    def __init__(self, message: str, y=None):
        super().__init__(message)
        self.y = y


class ResolutionError(LabError):
    """The grid cannot resolve a requested radius or stencil."""


class PreconditionError(LabError):
    """A checked precondition failed; `locations` lists offenders."""

    def __init__(self, message: str, locations=None):
        super().__init__(message)
        self.locations = list(locations or [])


class InvalidFamilyError(LabError):
    """An inf-sup kernel family (or one of its groups) is empty."""


class StiffnessError(LabError):
    """The pseudo-time step underflowed."""


class ConfigError(LabError):
    """Unparsable config, unknown recipe or unwritable output."""
