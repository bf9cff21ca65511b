"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class FKError(Exception):
    """Base class for all errors raised by fkparticles."""


class DimensionMismatch(FKError, ValueError):
    pass


class NotAGenerator(FKError, ValueError):
    pass


class NegativeTime(FKError, ValueError):
    pass


class DegenerateNormalizer(FKError, ArithmeticError):
    pass


class Reducible(FKError, ValueError):
    pass


class DegenerateSpectrum(FKError, ArithmeticError):
    pass


class NonpositiveEigenfunction(FKError, ValueError):
    pass


class IndexOutOfRange(FKError, IndexError):
    pass


class NegativePotentialForFV(FKError, ValueError):
    pass


class ZeroRate(FKError, ValueError):
    pass


class ZeroPotential(FKError, ValueError):
    """The selection clock would have intensity zero.

    Callers that can run without selection (the particle engine) catch this and
    fall back to pure mutation.
    """


class NonFiniteState(FKError, FloatingPointError):
    pass


class GridTouchesSingularity(FKError, ValueError):
    pass


class UnboundedResult(FKError, ValueError):
    pass


class InvalidInitialLaw(FKError, ValueError):
    pass


class RateBoundViolated(FKError, RuntimeError):
    pass


class InsufficientReplicas(FKError, ValueError):
    pass


class NonpositiveError(FKError, ValueError):
    pass


class OracleUnavailable(FKError, RuntimeError):
    pass


class ConfigSyntaxError(FKError, ValueError):
    def __init__(self, msg: str, line: int, column: int):
        super().__init__(f"{msg} (line {line}, column {column})")
        self.line = line
        self.column = column


class ConfigValidationError(FKError, ValueError):
    """Carries every violation found, each as ``(field_path, message)``."""

    def __init__(self, violations: list[tuple[str, str]]):
        self.violations = list(violations)
        body = "; ".join(f"{p}: {m}" for p, m in self.violations)
        super().__init__(f"{len(self.violations)} validation error(s): {body}")
