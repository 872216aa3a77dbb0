"""Exception hierarchy used by the fitters, parsers and the CLI."""


class ScresError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ParameterDomainError(ScresError, ValueError):
    """A parameter lies outside its physical domain."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class TraceError(ScresError, ValueError):
    """A trace violates its invariants or cannot be fitted."""

    exit_code = 3


class GeometryError(ScresError, ValueError):
    """Degenerate point set handed to the circle fit."""

    exit_code = 3


class FitDegeneracyError(ScresError, RuntimeError):
    """Data do not constrain one or more model parameters."""

    exit_code = 3

    def __init__(self, message, parameter=None):
        self.parameter = parameter
        super().__init__(message)


class PairBreakingError(ScresError, ValueError):
    """Photon energy at or above the pair-breaking threshold 2*Delta."""


class SimulationError(ScresError, RuntimeError):
    """Simulated chip is pathological (e.g. no self-consistent photon number)."""


class ParseError(ScresError, ValueError):
    """Input file could not be parsed."""

    exit_code = 2

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
