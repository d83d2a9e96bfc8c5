"""Exception types raised across the package."""


class STTDError(Exception):
    """Base class for all package errors."""


class NonFinite(STTDError, FloatingPointError):
    """A likelihood or gradient evaluated to a non-finite value."""


class ToleranceNotMet(STTDError):
    """Numerical integration or root finding ran out of budget."""


class DomainError(STTDError, ValueError):
    """Argument outside the support of a distribution."""


class ShapeMismatch(STTDError, ValueError):
    """Array shapes are incompatible for the requested operation."""


class StaleTape(STTDError, RuntimeError):
    """backward() called twice on the same recorded forward pass."""


class UnknownZone(STTDError, ValueError):
    pass


class MalformedRow(STTDError, ValueError):
    pass


class InsufficientZones(STTDError, ValueError):
    pass


class EmptyGraph(STTDError, ValueError):
    pass


class TooShort(STTDError, ValueError):
    pass


class Diverged(STTDError, RuntimeError):
    """Training loss was non-finite on two consecutive steps."""


class NoZeros(STTDError, ValueError):
    pass
