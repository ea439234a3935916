"""Exception types shared across the package."""


class SpecdetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SpecdetError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(SpecdetError):
    """A configuration value or argument violates a precondition."""


class ContractError(SpecdetError):
    """An API contract was violated (e.g. non-scalar differentiation root)."""


class DegenerateMaskError(SpecdetError):
    """A softmax row contained only -inf entries, so no weight can be assigned."""


class OracleError(SpecdetError):
    """A numeric oracle (finite differences) hit a non-finite value."""


class FormatError(SpecdetError):
    """A file did not match the expected on-disk format."""


class InvariantError(SpecdetError):
    """A domain invariant was violated (e.g. non-increasing wavelengths)."""


class SpectralCoverageError(SpecdetError):
    """The cube does not cover both sides of the visible/infrared boundary."""


class GenerationError(SpecdetError):
    """Synthetic scene generation could not satisfy its placement constraints."""


class AssignmentError(SpecdetError):
    """Ground-truth objects could not be assigned to distinct grid cells."""


class ConfigError(SpecdetError):
    """A run configuration file is malformed or fails validation."""


class TrainingDivergedError(SpecdetError):
    """Training produced a non-finite loss."""
