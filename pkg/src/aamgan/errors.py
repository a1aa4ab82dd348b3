"""Exception types raised across the package.

Each subclass maps onto one failure mode so that callers (and the CLI's
exit-code table) can react without parsing messages.
"""


class AAMGanError(Exception):
    """Base class for all package errors."""


# geometry / heads
class NearZeroVector(AAMGanError, ValueError):
    pass


class InvalidLabel(AAMGanError, ValueError):
    pass


# networks / losses
class ShapeMismatch(AAMGanError, ValueError):
    pass


class DomainError(AAMGanError, ValueError):
    pass


# training
class NonFiniteLoss(AAMGanError, RuntimeError):
    def __init__(self, component, iteration=None):
        self.component = component
        self.iteration = iteration
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite value in loss component '{component}'{where}")


class IOFailure(AAMGanError, OSError):
    pass


class VersionMismatch(AAMGanError):
    pass


class CorruptCheckpoint(AAMGanError):
    pass


# datasets
class MissingFile(IOFailure):
    pass


class DecodeError(IOFailure):
    pass


class BadLabel(AAMGanError, ValueError):
    pass


# metrics
class EmptySet(AAMGanError, ValueError):
    pass


class ClassMismatch(AAMGanError, ValueError):
    pass


class ProvenanceError(AAMGanError, ValueError):
    pass


class DimensionMismatch(AAMGanError, ValueError):
    pass


class NumericalFailure(AAMGanError, ArithmeticError):
    pass


# configuration
class ConfigError(AAMGanError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
