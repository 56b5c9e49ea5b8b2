"""Exception hierarchy shared across the package."""


class GridcpError(Exception):
    """Base class for all package errors."""


class CaseSyntaxError(GridcpError, ValueError):
    """Malformed case text. Carries the 1-based line and column of the fault."""

    def __init__(self, message, lineno=None, colno=None):
        self.lineno = lineno
        self.colno = colno
        where = ""
        if lineno is not None:
            where = f" (line {lineno}" + (f", column {colno})" if colno is not None else ")")
        super().__init__(message + where)


class CaseValidationError(GridcpError, ValueError):
    """A parsed case violates a structural invariant."""


class UnknownBus(GridcpError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown bus"


class Diverged(GridcpError, ArithmeticError):
    """Newton-Raphson hit its iteration limit without meeting tolerance."""

    def __init__(self, iterations, max_mismatch):
        self.iterations = iterations
        self.max_mismatch = max_mismatch
        super().__init__(
            f"power flow did not converge after {iterations} iterations "
            f"(max mismatch {max_mismatch:.3e} p.u.)"
        )


class SingularSystem(GridcpError, ArithmeticError):
    """Reduced DC susceptance matrix is singular (network islanded)."""


class ExhaustedSampling(GridcpError, RuntimeError):
    pass


class DimensionMismatch(GridcpError, ValueError):
    pass


class MissingBias(GridcpError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing bias"


class IndexMismatch(GridcpError, ValueError):
    pass


class DuplicateRecord(GridcpError, ValueError):
    pass


class EmptyStratum(GridcpError, LookupError):
    pass


class IntegrityError(GridcpError, ValueError):
    """Serialized artifact failed its checksum."""


class FingerprintMismatch(GridcpError, ValueError):
    """Artifacts derived from different inputs were mixed."""


class ConfigError(GridcpError, ValueError):
    """Study configuration is missing a field or holds an invalid value."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"config field '{field}': {message}")
