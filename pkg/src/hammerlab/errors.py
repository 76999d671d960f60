"""Exception hierarchy shared by every hammerlab module."""


class HammerLabError(Exception):
    """Base class; the CLI maps subclasses onto exit codes."""

    exit_code = 2


class ConfigurationError(HammerLabError, ValueError):
    pass


class AddressingError(HammerLabError, IndexError):
    pass


class ProtocolError(HammerLabError):
    pass


class UnsupportedPatternError(HammerLabError):
    pass


class BudgetError(HammerLabError):
    pass


class TraceValidationError(HammerLabError):
    def __init__(self, violations):
        self.violations = list(violations)
        head = "; ".join(str(v) for v in self.violations[:5])
        more = len(self.violations) - 5
        if more > 0:
            head += f"; ... {more} more"
        super().__init__(f"trace failed validation: {head}")


class MalformedLogError(HammerLabError):
    pass


class FileFormatError(HammerLabError, ValueError):
    """A persisted bitmap or network file is truncated or corrupt."""


class CalibrationError(HammerLabError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class UndefinedMetricError(HammerLabError, ArithmeticError):
    pass


class DomainError(HammerLabError, ValueError):
    pass


class ShapeError(HammerLabError, ValueError):
    pass


class GenerationError(HammerLabError):
    pass


class InvariantViolation(HammerLabError):
    exit_code = 3


def attach_context(exc, **coords):
    """Append grid coordinates to an exception message and return it."""
    where = ", ".join(f"{k}={v}" for k, v in coords.items())
    exc.args = (f"{exc.args[0] if exc.args else exc} [at {where}]",) + tuple(exc.args[1:])
    exc.grid_point = coords
    return exc
