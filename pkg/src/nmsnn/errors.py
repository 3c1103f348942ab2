"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are incompatible."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class RefusalError(ValueError):
    """The instance is too large for an exhaustive oracle."""


class NumericError(FloatingPointError):
    """A non-finite value appeared in a state that must stay finite."""


class StateError(RuntimeError):
    """The operation was called in the wrong lifecycle state."""


class InvariantViolation(RuntimeError):
    """A structural invariant of training was broken."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
