"""Exception hierarchy for geoext.

Every failure mode the engine reports deliberately gets its own class so
callers (and the CLI exit-code mapping) can discriminate without string
matching.
"""


class GeoextError(Exception):
    """Base class for all geoext errors."""


class ParseError(GeoextError):
    """Expression syntax error, with byte offset and expected-token set."""

    def __init__(self, message, offset, expected=()):
        super().__init__(f"{message} at offset {offset}"
                         + (f" (expected one of: {', '.join(sorted(expected))})"
                            if expected else ""))
        self.offset = offset
        self.expected = frozenset(expected)


class EvalDomainError(GeoextError):
    """Expression evaluated outside its real domain (ln of a negative,
    non-integer power of a non-positive base, division by zero)."""


class NumericDomainError(GeoextError):
    """A numeric evaluation produced NaN/Inf where a finite value is required."""


class DegenerateFrameError(GeoextError):
    """Frame matrix singular at the requested point."""


class DegenerateMetricError(GeoextError):
    """Metric block singular or not positive definite where it must be."""


class NotChaplyginError(GeoextError):
    """Symmetry validation failed: the supplied action does not make the
    system Chaplygin (bracket or invariance residual above tolerance)."""


class CompletionError(GeoextError):
    """No admissible completion block found; carries the worst eigenvalue."""

    def __init__(self, message, worst_eigenvalue=None):
        super().__init__(message)
        self.worst_eigenvalue = worst_eigenvalue


class IntegrationError(GeoextError):
    """Integration step failed; the partial trajectory is attached."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class PositivityError(GeoextError):
    """A quantity required to be positive on the working domain is not."""


class UnsupportedError(GeoextError):
    """Operation not applicable to this system (wrong structure, m=1, ...)."""


class ConfigError(GeoextError):
    """Malformed or inconsistent system configuration; carries an error code."""

    CODES = ("malformed", "dependent_constraints", "metric_not_pd", "bad_value")

    def __init__(self, code, message):
        if code not in self.CODES:
            raise ValueError(f"unknown config error code {code!r}")
        super().__init__(f"[{code}] {message}")
        self.code = code
