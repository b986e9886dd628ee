"""Exception hierarchy shared across the package."""


class OrdsimError(Exception):
    """Base class for all package errors."""


class DegenerateTail(OrdsimError, ValueError):
    """A cumulative probability P(Y >= k) is exactly 0 or 1."""


class RejectionExhausted(OrdsimError, RuntimeError):
    """Rejection sampling hit its attempt cap without a valid draw."""


class InvalidScenario(OrdsimError, ValueError):
    """A scenario produced an invalid treatment-arm simplex."""


class BoundsViolation(OrdsimError, ValueError):
    pass


class ShapeMismatch(OrdsimError, ValueError):
    pass


class InitFailure(OrdsimError, RuntimeError):
    """No finite-density starting point was found."""


class NonFiniteGradient(OrdsimError, FloatingPointError):
    """Gradient was NaN/Inf at a point with finite log density."""


class InsufficientReplicates(OrdsimError, ValueError):
    pass


class EmptyPlan(OrdsimError, ValueError):
    pass


class ParseError(OrdsimError, ValueError):
    pass


class DomainError(OrdsimError, ValueError):
    pass


class DuplicateSubject(OrdsimError, ValueError):
    pass


class EmptyAfterFilter(OrdsimError, ValueError):
    pass


class UnknownKind(OrdsimError, ValueError):
    pass


class MissingColumns(OrdsimError, ValueError):
    pass


class ConfigError(OrdsimError, ValueError):
    pass
